// Criterion-6-shaped pilot: Lissajous CQNP vs ACQNP on tiny level grids.
use cqnp::eval::{ablate_ntau, evaluate, LevelMode};
use cqnp::model::{ModelConfig, ModelKind};
use cqnp::task::{freeze_test_set, ProcessSpec};
use cqnp::train::{train, DataSource, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20000);
    let hidden: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let depth: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let adepth: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);
    let frozen = std::env::temp_dir().join("pilot-lj-frozen.ndjson");
    if !frozen.exists() {
        freeze_test_set(&ProcessSpec::lissajous(), 50, 16, 31, &frozen).unwrap();
    }
    let mut models = vec![];
    for kind in [ModelKind::Cqnp, ModelKind::Acqnp] {
        let mcfg = ModelConfig::uniform(kind, hidden, hidden, depth, adepth).unwrap();
        let mut cfg = TrainConfig::new(iters, 32, 1e-3, 1e-5, 50, 7);
        cfg.threads = 2;
        cfg.log_every = 2000;
        let t0 = std::time::Instant::now();
        let out = train(mcfg, &DataSource::Process(ProcessSpec::lissajous()), &cfg).unwrap();
        println!("{} trained ({:.0}s, loss {:.3})", kind.name(), t0.elapsed().as_secs_f64(), out.log.final_loss().unwrap());
        let rep = evaluate(&out.model, &frozen, 100, &LevelMode::Random { seed: 3 }, "lissajous").unwrap();
        println!("  random@100: ctx {:.3} tgt {:.3}", rep.context_ll, rep.target_ll);
        models.push(out.model);
    }
    let rows = ablate_ntau(&models[1], &models[0], &frozen, &[3, 5, 7, 9, 11], "lissajous").unwrap();
    for r in &rows {
        println!("{} n_tau={} ctx {:.3} tgt {:.3}", r.model, r.n_tau, r.context_ll, r.target_ll);
    }
    let d = |m: &str| {
        let at = |n: usize| rows.iter().find(|r| r.model == m && r.n_tau == n).unwrap().target_ll;
        at(11) - at(3)
    };
    println!("delta(3->11): acqnp {:.3} cqnp {:.3} (want acqnp < cqnp)", d("acqnp"), d("cqnp"));
}
