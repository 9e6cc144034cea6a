// Scratch: trained-policy true spread vs bound widths (removed before final).
use reachtrain::certify::sample_trajectories;
use reachtrain::scenario::Scenario;
use reachtrain::trainer::{train, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut s = Scenario::load(std::path::Path::new(&args[1])).unwrap();
    if args.len() > 2 { s.train.seed = args[2].parse().unwrap(); }
    if args.len() > 3 { s.train.epochs = args[3].parse().unwrap(); }
    s.train.plateau_window = 0;
    let r = train(&s, &TrainOptions::default()).unwrap();
    let graph = {
        let mut g = s.build_graph(s.train.seed).unwrap();
        g.set_trainable_params(&r.final_params).unwrap();
        g
    };
    let trajs = sample_trajectories(&graph, &s.initial_rect(), s.horizon, 2000, 9);
    let n_x = s.state_dim();
    println!("t | true spread | crown width (per dim)");
    for t in 0..=s.horizon {
        let mut lo = vec![f64::INFINITY; n_x];
        let mut hi = vec![f64::NEG_INFINITY; n_x];
        for tr in &trajs {
            for d in 0..n_x {
                lo[d] = lo[d].min(tr[t][d]);
                hi[d] = hi[d].max(tr[t][d]);
            }
        }
        let true_w: Vec<f64> = (0..n_x).map(|d| hi[d] - lo[d]).collect();
        let crown_w = r.tube.rects[t].widths();
        println!(
            "t={t:2} true ({:.3}, {:.3}, {:.4}) crown ({:.3}, {:.3}, {:.4})",
            true_w[0], true_w[1], true_w[2], crown_w[0], crown_w[1], crown_w[2]
        );
    }
}
