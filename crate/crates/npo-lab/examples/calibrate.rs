use npo_lab::config::RunConfig;
use npo_lab::metrics;
use npo_lab::tasks::{ArithOp, TaskConfig};
use npo_lab::trainer;
use std::path::PathBuf;

fn curve(dir: &PathBuf) -> Vec<(u64, f64, f64)> {
    metrics::read_stream(&dir.join("metrics.jsonl")).unwrap()
        .iter().filter_map(|r| r.as_step()).map(|s| (s.step, s.reward_ema, s.entropy_mean)).collect()
}

fn main() {
    let root = PathBuf::from("/tmp/cal");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    for (ef, pl) in [(0.25f64, 6usize), (0.25, 7), (0.4, 6), (0.4, 7)] {
        for seed in 1u64..=3 {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.steps = 500;
            cfg.grpo.lr = 6e-3;
            cfg.task = TaskConfig { count: 32, easy_fraction: ef, parity_len: pl, ops: vec![ArithOp::Add], ..TaskConfig::default() };
            let dir = root.join(format!("p{ef}-{pl}-{seed}"));
            trainer::train_run(&cfg, &dir).unwrap();
            let c = curve(&dir);
            let at = |s: u64| c.iter().find(|(x, _, _)| *x == s).map(|(_, r, e)| (*r, *e)).unwrap();
            let pts: Vec<String> = [100u64, 200, 300, 400, 500].iter()
                .map(|&s| { let (r, e) = at(s); format!("{s}:{r:.2}/{e:.2}") }).collect();
            println!("ef {ef} L{pl} seed {seed}: {}", pts.join(" "));
        }
    }
}
