use dbe_core::transactions::testbed::{self, Fixture, Shape};
use dbe_core::transactions::TxnMode;

fn check(fx: &Fixture, faults: usize) {
    let s = testbed::explore(fx, faults, 5);
    assert!(
        s.violations.is_empty(),
        "{} violations, first: {:?}",
        s.violations.len(),
        s.violations.first()
    );
    assert_eq!(s.non_quiescent, 0);
    assert_eq!(s.committed + s.aborted, s.runs);
}

#[test]
fn strict_chain_two_faults() {
    check(&Fixture::chain(3, TxnMode::Strict), 2);
}

#[test]
fn relaxed_chain_two_faults() {
    check(&Fixture::chain(3, TxnMode::Relaxed), 2);
}

#[test]
fn strict_fan_two_faults() {
    let mut fx = Fixture::chain(3, TxnMode::Strict);
    fx.shape = Shape::Fan;
    check(&fx, 2);
}

#[test]
fn strict_failing_step_two_faults() {
    let mut fx = Fixture::chain(3, TxnMode::Strict);
    fx.failing = Some(2);
    let s = testbed::explore(&fx, 2, 5);
    assert!(s.violations.is_empty(), "{:?}", s.violations.first());
    assert_eq!(s.committed, 0);
}
