use clap::{Parser, Subcommand};
use vldet_cli::{
    run_eval, run_gen_data, run_gradcheck, run_infer, run_train, EvalArgs, GenDataArgs, InferArgs,
    TrainArgs,
};

/// Desk-scale joint detector / vision-language training toolkit.
#[derive(Parser)]
#[command(name = "vldet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (JSON lines).
    GenData(GenDataArgs),
    /// Train the joint model; writes checkpoint.json, metrics.json, config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; writes eval.json.
    Eval(EvalArgs),
    /// Run inference on a dataset; writes detections.jsonl.
    Infer(InferArgs),
    /// Verify analytic gradients of the full training graph against central
    /// finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData(args) => run_gen_data(args).map(|s| {
            println!("wrote {} scenes (seed {}) to {}", s.count, s.seed, s.out.display());
        }),
        Command::Train(args) => run_train(args).map(|s| {
            match s.final_map50 {
                Some(map50) => println!(
                    "trained {} epochs ({}) -> {} | final val mAP@0.5 {:.4}",
                    s.epochs,
                    s.mode,
                    s.out_dir.display(),
                    map50
                ),
                None => println!(
                    "trained {} epochs ({}) -> {}",
                    s.epochs,
                    s.mode,
                    s.out_dir.display()
                ),
            };
        }),
        Command::Eval(args) => run_eval(args).map(|doc| {
            println!(
                "mAP@0.5 {:.4} | mAP@[.5:.95] {:.4} | alpha {} | {} images -> {}",
                doc.map50,
                doc.map5095,
                doc.alpha,
                doc.n_images,
                args.out.display()
            );
            for (name, ap) in &doc.per_class_ap {
                println!("  AP@0.5 {name}: {ap:.4}");
            }
        }),
        Command::Infer(args) => run_infer(args).map(|s| {
            println!(
                "{} detections over {} scenes -> {}",
                s.n_detections,
                s.n_scenes,
                s.out.display()
            );
        }),
        Command::Gradcheck { seed } => run_gradcheck(*seed).map(|report| {
            println!("finite-difference gradient check (seed {seed}, eps 1e-6)");
            println!("{:<16} {:>14} {:>8}", "group", "max_rel_error", "params");
            for g in &report.groups {
                println!("{:<16} {:>14.3e} {:>8}", g.group, g.max_rel_error, g.params_checked);
            }
            if report.passed() {
                println!("PASS (all groups below {:.0e})", report.tolerance);
            } else {
                println!(
                    "FAIL (tolerance {:.0e}): {}",
                    report.tolerance,
                    report.failing_groups().join(", ")
                );
                std::process::exit(1);
            }
        }),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
