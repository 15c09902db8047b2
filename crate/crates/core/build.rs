use std::process::Command;

fn main() {
    let pkg = env!("CARGO_PKG_VERSION");
    let git = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match git {
        Some(g) => format!("{pkg}+g{g}"),
        None => pkg.to_string(),
    };
    println!("cargo:rustc-env=VDFORMER_VERSION={version}");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
}
