use holovox::gradcheck::{composed_reports, primitive_reports, CaseReport, SuiteConfig};

fn assert_all(reports: &[CaseReport]) {
    let mut bad = Vec::new();
    for r in reports {
        println!(
            "{:<32} {}-bit  max rel {:.2e}  ({} points)",
            r.name,
            r.bits,
            r.max_rel_error(),
            r.coords.len()
        );
        if !r.passed() {
            bad.push(format!("{} ({}-bit): {:?}", r.name, r.bits, r.coords.iter().filter(|c| c.rel_error >= r.tolerance).collect::<Vec<_>>()));
        }
    }
    assert!(bad.is_empty(), "failing cases:\n{}", bad.join("\n"));
}

#[test]
fn every_primitive_matches_finite_differences() {
    assert_all(&primitive_reports(&SuiteConfig::default()).unwrap());
}

#[test]
fn composed_paths_match_finite_differences() {
    assert_all(&composed_reports(&SuiteConfig::default()).unwrap());
}
