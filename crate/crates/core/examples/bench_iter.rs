// Rough throughput probe: seconds per training iteration at several widths.
use cqnp::model::{ModelConfig, ModelKind, Which};
use cqnp::task::ProcessSpec;
use cqnp::train::{train, DataSource, TrainConfig};
use std::time::Instant;

fn main() {
    let n_iters = 30;
    for (label, d_e, hidden, depth) in [
        ("w32d2", 32, 32, 2),
        ("w48d2", 48, 48, 2),
        ("w64d2", 64, 64, 2),
        ("w128d3", 128, 128, 3),
    ] {
        for kind in [ModelKind::Cnp, ModelKind::Cqnp, ModelKind::Acqnp] {
            let cfg_model = ModelConfig::uniform(kind, d_e, hidden, depth, depth).unwrap();
            let mut cfg = TrainConfig::new(n_iters, 32, 1e-3, 1e-5, 25, 7);
            cfg.threads = 2;
            cfg.log_every = 1000;
            cfg.loss_points = Which::All;
            let data = DataSource::Process(ProcessSpec::double_sine());
            let t0 = Instant::now();
            let out = train(cfg_model, &data, &cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64() / n_iters as f64;
            println!(
                "{label} {}: {:.4} s/iter -> 2e4 iters = {:.1} min (loss {:.3})",
                kind.name(), dt, dt * 20000.0 / 60.0, out.log.final_loss().unwrap()
            );
        }
    }
}
