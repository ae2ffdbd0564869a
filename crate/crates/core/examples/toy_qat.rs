//! Float pretraining then 4-bit-constrained QAT on the synthetic toy task.
//!
//! `cargo run --release -p qvit-core --example toy_qat [pretrain_epochs] [qat_epochs]`

use std::time::Instant;

use qvit::data::{DatasetSpec, Split};
use qvit::trainer::{calibration_batch, evaluate, init_qat, pretrain_float, train_qat, TrainConfig};
use qvit::vit::ModelConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let data = DatasetSpec::Synthetic {
        seed: 0,
        train_count: 512,
        eval_count: 256,
        noise: 0.3,
    };
    let mut cfg = TrainConfig::new(ModelConfig::toy(), data);
    cfg.epochs = args.first().copied().unwrap_or(8);
    let train = cfg.load_split(Split::Train)?;
    let eval = cfg.load_split(Split::Eval)?;

    let t = Instant::now();
    let float = pretrain_float(&cfg, &train, &eval)?;
    for m in &float.metrics {
        println!("float epoch {} loss {:.4} train {:.3} eval {:.3}", m.epoch, m.train_loss, m.train_accuracy, m.eval_accuracy);
    }
    let float_acc = evaluate(&float.model, &eval, 256)?;
    println!("pretrain {:.1}s, train acc {:.3}, eval acc {float_acc:.3}", t.elapsed().as_secs_f64(), evaluate(&float.model, &train, 256)?);

    cfg.epochs = args.get(1).copied().unwrap_or(10);
    let t = Instant::now();
    let model = init_qat(&float.model, &cfg, &calibration_batch(&cfg, &train))?;
    let qat = train_qat(model, &cfg, &train, &eval)?;
    for m in &qat.metrics {
        println!(
            "{:?} epoch {} loss {:.4} pen {:.4} train {:.3} eval {:.3} bitops/c {:.4}",
            m.stage,
            m.epoch,
            m.train_loss,
            m.penalty,
            m.train_accuracy,
            m.eval_accuracy,
            m.bitops.unwrap() / m.budget.unwrap()
        );
    }
    println!("qat {:.1}s, eval ratio {:.3}", t.elapsed().as_secs_f64(), qat.final_eval_accuracy().unwrap() / float_acc);
    Ok(())
}
