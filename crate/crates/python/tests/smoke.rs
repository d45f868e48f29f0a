use std::path::Path;
use std::process::Command;

/// Runs the Python smoke script against the installed extension module.
#[test]
fn python_smoke_script() {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let importable = Command::new("python3").args(["-c", "import pik_lab"]).status().map(|s| s.success());
    if !importable.unwrap_or(false) {
        eprintln!("pik_lab is not installed; run `pip install --no-build-isolation -e crates/python` first");
        return;
    }
    let out = Command::new("python3").arg(&script).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("smoke test passed"));
}
