mod common;

use common::corpus;

#[test]
fn corpus_is_large_enough() {
    assert!(corpus::valid().len() + corpus::invalid().len() >= 20);
    assert!(corpus::valid().len() >= 10);
    assert!(corpus::invalid().len() >= 10);
}

#[test]
fn valid_plans_round_trip_and_count() {
    let failures: Vec<String> = corpus::valid().iter().filter_map(|p| corpus::check_valid(p).err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn invalid_plans_report_positions() {
    let failures: Vec<String> = corpus::invalid().iter().filter_map(|p| corpus::check_invalid(p).err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
