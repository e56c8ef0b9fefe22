use lcasr_web::{coverage, rotary_scores, warmup_points};

#[test]
fn warmup_is_monotone_and_capped() {
    let v = warmup_points(5.0, 100, 655.0, 50, 40).unwrap();
    assert_eq!(v.len(), 40);
    assert!(v.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*v.last().unwrap(), 655.0);
    assert!(warmup_points(5.0, 0, 655.0, 1, 3).is_err());
}

#[test]
fn rotary_score_starts_at_one_and_decays() {
    let s = rotary_scores(10_000.0, 64, 2000).unwrap();
    assert!((s[0] - 1.0).abs() < 1e-12);
    assert!(s.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    let far = s[1000..].iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(far < 0.5, "{far}");
    assert!(rotary_scores(10_000.0, 7, 10).is_err());
}

#[test]
fn coverage_matches_overlap() {
    let c = coverage(4096, 1024, 512).unwrap();
    assert_eq!(c.len(), 512);
    assert_eq!(c[0], 1);
    assert_eq!(c[100], 2);
    assert!(c.iter().all(|&n| (1..=2).contains(&n)));
    assert!(coverage(4096, 1001, 512).is_err());
}
