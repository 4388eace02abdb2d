use panel_triage::regression::{predict_agreement, published_dual_signal_fit};
use panel_triage::sim::{generate_panel, SimConfig};
use panel_triage::stats::{bh_adjust, pearson_r, per_model_reliability, KappaReference};

#[test]
fn pearson_hand_case() {
    let r = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((r - 0.8).abs() < 1e-12);
    assert!((pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson_r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn bh_edge_cases() {
    let one = bh_adjust(&[1.0], 0.05).unwrap();
    assert_eq!(one.adjusted, vec![1.0]);
    assert_eq!(one.rejected, vec![false]);
    assert!(bh_adjust(&[], 0.05).unwrap().adjusted.is_empty());
    assert!(bh_adjust(&[1.5], 0.05).is_err());
}

#[test]
fn published_plane_at_full_confidence() {
    let p = predict_agreement(&published_dual_signal_fit(), 5.0, Some(0.0)).unwrap();
    assert!((p.value - 96.57).abs() < 0.01);
    assert!(!p.out_of_range);
    let low = predict_agreement(&published_dual_signal_fit(), 1.0, Some(1.0)).unwrap();
    assert!(low.out_of_range);
}

#[test]
fn weak_model_ranks_last() {
    let mut cfg = SimConfig::basic(80, 5, 6, 0.15, 21);
    cfg.skill_offsets[3] = 0.3;
    let (ds, _) = generate_panel(&cfg).unwrap();
    let rel = per_model_reliability(&ds, KappaReference::PanelMajority).unwrap();
    assert_eq!(rel.ranking().last().unwrap().model_id, "m4");
}

#[test]
fn two_model_panel_uses_unanimous_cells() {
    let (ds, _) = generate_panel(&SimConfig::basic(50, 4, 2, 0.3, 4)).unwrap();
    let rel = per_model_reliability(&ds, KappaReference::PanelMajority).unwrap();
    assert!(rel.warnings.iter().any(|w| w.contains("tied")));
    for m in rel.ranking() {
        assert_eq!(m.kappa, Some(1.0));
    }
}
