//! The extractor against a naive recount on small random streams, plus
//! hand-built examples.

mod suites;

use suites::features as s;

#[test]
fn extract_matches_recount_on_random_micro_streams() {
    s::extract_matches_recount_on_random_micro_streams();
}

#[test]
fn hand_built_order_ratios() {
    s::hand_built_order_ratios();
}

#[test]
fn flat_day_follows_degenerate_rules() {
    s::flat_day_follows_degenerate_rules();
}

#[test]
fn extract_is_pure() {
    s::extract_is_pure();
}
