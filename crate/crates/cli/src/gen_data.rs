use clap::Parser;
use slotkit::scenegen::{generate_split_dataset, save_dataset, GeneratorSpec};
use std::path::PathBuf;

#[derive(Parser)]
pub struct Args {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of scenes.
    #[arg(long, default_value_t = 1000)]
    pub num: usize,
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 6)]
    pub max_objects: usize,
    /// Fraction of scenes assigned to the train split.
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    /// Fraction assigned to the validation split (remainder is test).
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn exec(args: Args) -> anyhow::Result<()> {
    let spec = GeneratorSpec {
        canvas_size: args.canvas,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        ..Default::default()
    };
    let samples = generate_split_dataset(&spec, args.num, args.train_frac, args.val_frac, args.seed)?;
    save_dataset(&args.out, &samples)?;
    println!(
        "wrote {} scenes ({}x{}, {}-{} objects) to {}",
        samples.len(),
        args.canvas,
        args.canvas,
        args.min_objects,
        args.max_objects,
        args.out.display()
    );
    Ok(())
}
