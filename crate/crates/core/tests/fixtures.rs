use legmimic::testkit::{closed_form_fixtures, evaluate_fixture, FixtureKind, Stepper};

fn check(stepper: Stepper) {
    for case in closed_form_fixtures().unwrap() {
        if matches!(case.kind, FixtureKind::SpringPenetration { .. }) && stepper == Stepper::Oracle {
            continue;
        }
        let got = evaluate_fixture(&case, stepper).unwrap();
        assert_eq!(got.len(), case.expected.len(), "{}", case.description);
        for (g, e) in got.iter().zip(&case.expected) {
            let rel = (g - e).abs() / e.abs();
            assert!(rel <= case.tolerance, "{}: got {g}, expected {e}, rel {rel:e}", case.description);
        }
    }
}

#[test]
fn fixtures_match_closed_forms_under_ncp() {
    check(Stepper::Ncp);
}

#[test]
fn fixtures_match_closed_forms_under_oracle() {
    check(Stepper::Oracle);
}

#[test]
fn fixtures_serialize() {
    for case in closed_form_fixtures().unwrap() {
        let s = serde_json::to_string(&case).unwrap();
        let back: legmimic::testkit::FixtureCase = serde_json::from_str(&s).unwrap();
        assert_eq!(back.expected, case.expected);
        assert!(!case.oracle.is_empty());
    }
}
