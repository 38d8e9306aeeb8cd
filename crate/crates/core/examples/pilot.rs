// Capacity pilot: desk-scale Double Sine gap between CQNP and CNP.
use cqnp::eval::{evaluate, LevelMode};
use cqnp::model::{ModelConfig, ModelKind};
use cqnp::task::{freeze_test_set, ProcessSpec};
use cqnp::train::{train, DataSource, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let hidden: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let depth: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let frozen = std::env::temp_dir().join("pilot-ds-frozen.ndjson");
    if !frozen.exists() {
        freeze_test_set(&ProcessSpec::double_sine(), 50, 16, 2024, &frozen).unwrap();
    }

    for kind in [ModelKind::Cqnp, ModelKind::Cnp] {
        let t0 = Instant::now();
        let mcfg = ModelConfig::uniform(kind, hidden, hidden, depth, depth).unwrap();
        let mut cfg = TrainConfig::new(iters, 32, lr, 1e-5, 25, 11);
        cfg.threads = 2;
        cfg.log_every = 2000;
        let out = train(mcfg, &DataSource::Process(ProcessSpec::double_sine()), &cfg).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();
        for ev_ntau in [25usize, 100] {
            let rep = evaluate(&out.model, &frozen, ev_ntau, &LevelMode::Random { seed: 5 }, "double_sine").unwrap();
            println!(
                "{} h{hidden} d{depth} lr{lr} iters{iters} eval@{ev_ntau}: ctx {:.3} tgt {:.3}  (train loss {:.3}, {:.0}s)",
                kind.name(), rep.context_ll, rep.target_ll,
                out.log.final_loss().unwrap(), train_secs
            );
            if kind == ModelKind::Cnp { break; }
        }
    }
}
