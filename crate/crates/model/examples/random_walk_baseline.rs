//! Measures the uniform random-walk baseline on the held-out generalization
//! set and prints its summary metrics.
//!
//! Run with `cargo run --example random_walk_baseline -p bevnav-model`.

#[path = "../tests/common/generalization.rs"]
mod generalization;

use bevnav_core::metrics::Summary;

fn main() {
    let set = generalization::held_out();
    let test = generalization::flatten(&set);
    let s = generalization::random_walk_baseline(&test);
    println!("{}", Summary::CSV_HEADER);
    println!("{}", s.csv_row());
    println!("random walk on {} held-out episodes: SR {:.1}%, OSR {:.1}%, SPL {:.3}", s.episodes, s.sr, s.osr, s.spl);
}
