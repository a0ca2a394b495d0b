//! Load a scenario file, apply dotted-path overrides and run it into a
//! directory, the same path the `stmlab run` command takes.
//!
//! ```text
//! cargo run --release --example run_scenario -- crates/core/scenarios/sts.json experiment.sts.points=21
//! ```

use std::path::Path;

use stmlab::scenario::{parse_override, Scenario};

fn main() {
    let mut args = std::env::args().skip(1);
    let file = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/sts.json").into());
    let overrides: Vec<_> = args.map(|a| parse_override(&a).expect("key=value")).collect();
    let text = std::fs::read_to_string(&file).expect("readable scenario");
    let scenario = match Scenario::from_value_text(&text, &overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let out = Path::new("out").join(&scenario.name);
    let base = Path::new(&file).parent().unwrap_or(Path::new("."));
    match scenario.run(base, &out) {
        Ok(o) => {
            for e in &o.manifest.outputs {
                println!("{:>9} {}  {}", e.bytes, &e.sha256[..12], e.path);
            }
        }
        Err((status, e)) => {
            eprintln!("{e}");
            std::process::exit(status.code());
        }
    }
}
