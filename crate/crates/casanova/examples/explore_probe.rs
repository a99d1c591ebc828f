use casanova::explore::{explore, ExploreConfig};
use casanova::protocol::ProtocolVariant;
use casanova::sim::Behavior;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let f: u32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let mb: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let budget: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3_000_000);
    let mut cfg = ExploreConfig::new(n, f, ProtocolVariant::Casanova, mb);
    cfg.behavior = Behavior::Equivocator;
    cfg.state_budget = budget;
    let t0 = Instant::now();
    let out = explore(&cfg).unwrap();
    println!(
        "n={n} f={f} max_blocks={mb}: states={} budget_exhausted={} violation={} elapsed={:?}",
        out.states_explored,
        out.budget_exhausted,
        out.violation.is_some(),
        t0.elapsed()
    );
    if let Some(v) = out.violation {
        println!("violation on {}: {:?}", v.index, v.values);
        for s in v.schedule.iter().take(40) {
            println!("  {s}");
        }
    }
}
