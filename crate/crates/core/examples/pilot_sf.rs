// Criterion-7-shaped pilot: speed-flow CQNP vs CNP.
use cqnp::eval::{evaluate_batches, LevelMode};
use cqnp::model::{ModelConfig, ModelKind};
use cqnp::task::speedflow::load_speed_flow;
use cqnp::task::TaskBatch;
use cqnp::train::{train, DataSource, TrainConfig};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20000);
    let hidden: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let csv = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/speed_flow.csv");
    let lanes = load_speed_flow(&csv, 99).unwrap();
    let eval_batch = TaskBatch::new(vec![lanes[0].eval_task(), lanes[1].eval_task()]).unwrap();

    for (kind, lr, n_tau) in [(ModelKind::Cqnp, 5e-3, 100usize), (ModelKind::Cnp, 1e-4, 1)] {
        let mcfg = ModelConfig::uniform(kind, hidden, hidden, 2, 2).unwrap();
        let mut cfg = TrainConfig::new(iters, 2, lr, 1e-5, n_tau, 13);
        cfg.threads = 2;
        cfg.log_every = 2000;
        let data = DataSource::SpeedFlow(Box::new(load_speed_flow(&csv, 99).unwrap()));
        let t0 = std::time::Instant::now();
        let out = train(mcfg, &data, &cfg).unwrap();
        let rep = evaluate_batches(&out.model, std::slice::from_ref(&eval_batch), 50, &LevelMode::Random { seed: 4 }, "speed_flow").unwrap();
        println!(
            "{} h{hidden} iters{iters}: ctx {:.3} tgt {:.3} (train loss {:.3}, {:.0}s)",
            kind.name(), rep.context_ll, rep.target_ll, out.log.final_loss().unwrap(), t0.elapsed().as_secs_f64()
        );
    }
}
