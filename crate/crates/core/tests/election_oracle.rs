mod common;

#[test]
fn two_hundred_elections_agree_with_oracle() {
    let mut elected = 0;
    for seed in 0..200 {
        if common::check_election(seed).unwrap() {
            elected += 1;
        }
    }
    assert!(elected > 100, "only {elected} elections succeeded");
}
