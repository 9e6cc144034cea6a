// Scratch experiment runner (removed before final commit).
use reachtrain::certify::sphere_clearance;
use reachtrain::losses::SphereObstacle;
use reachtrain::scenario::Scenario;
use reachtrain::trainer::{train, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let path = std::path::Path::new(&args[1]);
    let mut s = Scenario::load(path).unwrap();
    if args.len() > 2 { s.train.seed = args[2].parse().unwrap(); }
    if args.len() > 3 { s.train.epochs = args[3].parse().unwrap(); }
    if args.len() > 4 { s.train.plateau_window = args[4].parse().unwrap(); }
    let dump = std::env::var("DUMP").is_ok();
    let t0 = std::time::Instant::now();
    let r = train(&s, &TrainOptions::default()).unwrap();
    println!(
        "seed {}: epochs {} termination {:?} loss {} -> {} wall {:.1}s",
        s.train.seed, r.epochs_run, r.termination,
        r.history.first().map(|b| b.total).unwrap_or(f64::NAN),
        r.history.last().map(|b| b.total).unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64()
    );
    println!(
        "  criteria_pass {} avoided {} goal_t {:?} final_goal_dist {:.3} mc {:?} clearance {:?}",
        r.criteria_pass, r.cert.all_avoided(), r.cert.goal_containment_t,
        r.cert.final_goal_distance, r.cert.mc_violations, r.cert.min_sphere_clearance,
    );
    if let Some(inv) = &r.cert.invariance {
        println!("  invariance t*={} margin {:.4}", inv.t_star, inv.margin);
    }
    if dump {
        let boxes = s.box_obstacles();
        let spheres: Vec<SphereObstacle> = s.sphere_obstacles();
        for (t, rect) in r.tube.rects.iter().enumerate() {
            let c = rect.center();
            let w = rect.widths();
            let pd = &s.system.position_dims;
            let mut note = String::new();
            for (k, b) in boxes.iter().enumerate() {
                if !reachtrain::certify::box_disjoint(rect, b, pd) {
                    note += &format!(" HIT-box{k}");
                }
            }
            for (k, o) in spheres.iter().enumerate() {
                let cl = sphere_clearance(rect, o, pd);
                if cl <= 0.0 { note += &format!(" HIT-sph{k}({cl:.2})"); }
            }
            println!("  t={t:2} center ({:+.2}, {:+.2}) widths ({:.3}, {:.3}, {:.4}){note}",
                c[0], c[1], w[0], w[1], w[2]);
        }
    }
}
