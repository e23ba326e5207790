use cbindgen::{Builder, Config, EnumConfig, Language, RenameRule};

fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("set by cargo");
    println!("cargo:rerun-if-changed=src/lib.rs");
    let config = Config {
        enumeration: EnumConfig {
            rename_variants: RenameRule::ScreamingSnakeCase,
            prefix_with_name: true,
            ..Default::default()
        },
        ..Default::default()
    };
    Builder::new()
        .with_config(config)
        .with_crate(&crate_dir)
        .with_language(Language::C)
        .with_include_guard("MMLORA_H")
        .with_cpp_compat(true)
        .generate()
        .expect("header generation")
        .write_to_file(format!("{crate_dir}/include/mmlora.h"));
}
