use std::path::Path;

fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR is set by cargo");
    let out_dir = std::env::var("OUT_DIR").expect("OUT_DIR is set by cargo");
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(Path::new(&crate_dir).join("cbindgen.toml")).unwrap_or_default();
    let bindings = match cbindgen::Builder::new().with_crate(&crate_dir).with_config(config).generate() {
        Ok(b) => b,
        Err(e) => {
            println!("cargo:warning=header not generated: {e}");
            return;
        }
    };
    bindings.write_to_file(Path::new(&out_dir).join("poisonbench.h"));
    let include = Path::new(&crate_dir).join("include");
    if std::fs::create_dir_all(&include).is_ok() {
        bindings.write_to_file(include.join("poisonbench.h"));
    }
}
