// Scratch: track per-epoch containment margin (removed before final commit).
use reachtrain::certify::box_disjoint;
use reachtrain::crown::{extract_tube, rollout_on_tape, stage_params};
use reachtrain::diffcore::Tape;
use reachtrain::losses::{total_loss, LossInputs};
use reachtrain::scenario::Scenario;
use reachtrain::trainer::{adam_step, AdamParams, AdamState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut s = Scenario::load(std::path::Path::new(&args[1])).unwrap();
    if args.len() > 2 { s.train.seed = args[2].parse().unwrap(); }
    if args.len() > 3 { s.train.epochs = args[3].parse().unwrap(); }
    let mut graph = s.build_graph(s.train.seed).unwrap();
    let cfg = s.bound_config();
    let hp = AdamParams::with_lr(s.train.lr);
    let mut adam = AdamState::new(&graph.trainable_params());
    let x0 = s.initial_rect();
    let goal = s.goal_region();
    let boxes = s.box_obstacles();
    let spheres = s.sphere_obstacles();
    let pd = s.system.position_dims.clone();
    let (g_lo, g_hi) = (goal.lo(), goal.hi());
    let mut tape = Tape::new();
    let mut best = f64::INFINITY;
    for epoch in 0..s.train.epochs {
        tape.clear();
        let staged = stage_params(&mut tape, &graph, true).unwrap();
        let tube_ids = rollout_on_tape(&mut tape, &graph, &staged, &x0, s.horizon, &cfg).unwrap();
        let inputs = LossInputs {
            goal: &goal, box_obstacles: &boxes, sphere_obstacles: &spheres,
            position_dims: &pd, velocity_dims: &s.system.velocity_dims,
            weights: s.loss_weights(), t_inv: s.weights.t_inv, vol_normalizer: None,
        };
        let (total, bd) = total_loss(&mut tape, &tube_ids, &inputs).unwrap();
        let rects = extract_tube(&tape, &tube_ids).unwrap();
        // Containment margin: max sticking-out over goal dims, minimized over t
        // among timesteps where all obstacles are avoided tube-wide.
        let avoided = rects.iter().all(|r| boxes.iter().all(|b| box_disjoint(r, b, &pd)));
        let margin = rects.iter().map(|r| {
            pd.iter().enumerate().map(|(k, &d)| {
                (g_lo[k] - r.lo()[d]).max(r.hi()[d] - g_hi[k])
            }).fold(f64::NEG_INFINITY, f64::max)
        }).fold(f64::INFINITY, f64::min);
        if avoided && margin < best {
            best = margin;
            if margin <= 0.0 { println!("CERTIFIED at {epoch} margin {margin:.4}"); }
        }
        if epoch % 2000 == 0 || epoch + 1 == s.train.epochs {
            let hw = rects.last().unwrap().widths()[2];
            println!("epoch {epoch}: loss {:.1} avoided {avoided} margin-now {margin:.3} best {best:.3} head-w {hw:.5}", bd.total);
        }
        let map = tape.backward(total).unwrap();
        let ids = staged.trainable_ids(&graph);
        let grads: Vec<_> = ids.iter().map(|id| map.get(*id).unwrap().clone()).collect();
        let mut theta = graph.trainable_params();
        adam_step(&hp, &mut adam, &mut theta, &grads).unwrap();
        graph.set_trainable_params(&theta).unwrap();
    }
    println!("best margin over run: {best:.4}");
}
