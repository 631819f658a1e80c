//! Central-difference checks of every loss and block in double precision.

mod common;

#[test]
fn all_losses_and_blocks_match_finite_differences() {
    let cases = common::gradient_suite();
    assert!(cases.len() >= 17);
    for c in &cases {
        eprintln!("{:<18} checked {:>4}  max rel {:.2e}", c.name, c.report.checked, c.report.max_rel_error);
        assert!(c.report.checked > 0, "{} checked nothing", c.name);
        assert!(
            c.report.max_rel_error < 1e-3,
            "{}: rel error {:.3e} at {}",
            c.name,
            c.report.max_rel_error,
            c.report.worst_index
        );
    }
}
