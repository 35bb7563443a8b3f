//! Runs every acceptance criterion at full size and prints one line each.

use alternet::bench::CountingAlloc;
use alternet::verify::{run_all, Outcome, VerifyOptions};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    // `cargo test -- --list` and similar probes expect a quick exit
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let checks = run_all(VerifyOptions { full: true }, |c| println!("{}", c.line()));
    let failed = checks.iter().filter(|c| c.outcome != Outcome::Pass).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
