//! Run a small staged pipeline from a TOML config and replay it from its
//! manifest.

use std::path::Path;

use acelab::pipeline::{replay, run_pipeline, PipelineConfig};

const CONFIG: &str = r#"
seed = 3
stages = ["dataset", "pretrain", "pattern", "attack", "finetune", "sample", "evaluate"]

[dataset]
groups = 2
per_group = 4
size = 16

[pretrain]
steps = 100

[pretrain.dataset]
groups = 4
per_group = 4
size = 16
seed = 1000

[pattern]
repetition = 4
height = 16
width = 16

[attack]
protected = 3

[attack.budget]
epochs = 1
pgd_steps = 4
finetune_steps = 2

[finetune.config]
steps = 40

[sample]
count = 2
steps = 20
"#;

fn main() -> acelab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = PipelineConfig::from_toml(CONFIG, Path::new("."))?;
    let out = Path::new("target/examples-out/pipeline_replay");
    let manifest = run_pipeline(&cfg, &out.join("run"), "example")?;
    for s in &manifest.stages {
        println!("{:<9} {:>6} ms  {} outputs", s.stage.name(), s.elapsed_ms, s.outputs.len());
    }
    let report = replay(&out.join("run/manifest.json"), &out.join("replay"))?;
    println!(
        "replay compared {} outputs, {} mismatches, exact: {}",
        report.compared,
        report.mismatches.len(),
        report.is_exact()
    );
    Ok(())
}
