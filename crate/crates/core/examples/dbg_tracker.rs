use microdrive_core::evaluation::policy::ExpertPlanTracker;
use microdrive_core::evaluation::run_closed_loop;
use microdrive_core::world::scenario::Category;

fn main() {
    let suite: Vec<(Category, u64)> =
        Category::ALL.iter().flat_map(|&c| (0..20).map(move |s| (c, s))).collect();
    let (report, _) = run_closed_loop(ExpertPlanTracker::default, &suite);
    for (cat, agg) in &report.per_category {
        println!("{cat:15} SR {:5.1} DS {:5.1} coll {:4.1}", agg.success_rate, agg.driving_score, agg.collision_rate);
    }
    println!("overall SR {:.1} DS {:.1}", report.overall.success_rate, report.overall.driving_score);
}
