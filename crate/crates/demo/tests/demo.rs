//! The demo's operations against independent recomputation.

use airwayal::morphology::skeletonize;
use airwayal::orchestrator::{generate_phantom, PhantomSpec};
use airwayal::volume::VolumeDims;
use airwayal_demo::{DemoState, Layers, SIZE};

fn state(seed: u64, branches: usize) -> DemoState {
    DemoState::generate(seed, branches, 0.12).unwrap()
}

#[test]
fn generation_matches_the_core_generator() {
    let s = state(3, 7);
    let spec = PhantomSpec {
        dims: VolumeDims::cube(SIZE),
        branch_count: (7, 7),
        ..PhantomSpec::default()
    };
    let p = generate_phantom(3, &spec).unwrap();
    assert_eq!(s.gt(), &p.gt_mask);
    assert_eq!(s.image(), &p.image);
    assert_eq!(s.info().branch_count, 7);
    assert!(DemoState::generate(3, 4, 0.12).is_err());
}

#[test]
fn tree_recovers_generated_branches() {
    let mut hits = 0;
    for seed in 0..10 {
        let mut s = state(seed, 5);
        let t = s.extract_tree();
        assert_eq!(t.centerline_voxels, skeletonize(s.gt()).count());
        assert_eq!(t.branch_lengths.len(), t.branch_count.unwrap_or(0));
        hits += usize::from(t.branch_count == Some(5));
    }
    assert!(hits >= 9, "{hits}/10");
}

#[test]
fn threshold_scores_match_direct_counts() {
    let mut s = state(2, 5);
    for (threshold, post) in [(0.5, false), (0.35, false), (0.5, true)] {
        let info = s.score_threshold(threshold, post, 0.8);
        if !post {
            let pred: Vec<bool> = s.image().data().iter().map(|&v| f64::from(v) >= threshold).collect();
            let gt = s.gt().data();
            let tp = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count() as f64;
            let np = pred.iter().filter(|p| **p).count() as f64;
            let expected = 2.0 * tp / (np + s.gt().count() as f64);
            assert_eq!(info.pred_voxels, np as usize);
            assert!((info.report.dsc.unwrap() - expected).abs() < 1e-12);
        }
        let dsc = info.report.dsc.unwrap();
        assert!(dsc > 0.6, "threshold {threshold}: {dsc}");
    }
    // Nothing survives a threshold above every intensity.
    let info = s.score_threshold(1e9, true, 0.8);
    assert_eq!((info.pred_voxels, info.report.dsc), (0, Some(0.0)));
}

#[test]
fn render_paints_requested_layers() {
    let mut s = state(1, 7);
    s.extract_tree();
    s.score_threshold(0.5, true, 0.8);
    let plain = s.render(None, Layers::default());
    assert_eq!(plain.len(), SIZE * SIZE * 4);
    assert!(plain.chunks(4).all(|p| p[3] == 255 && p[0] == p[1] && p[1] == p[2]));

    let cl = skeletonize(s.gt());
    let z = cl.voxels().next().unwrap()[2];
    let px = s.render(
        Some(z),
        Layers {
            centerline: true,
            ..Layers::default()
        },
    );
    let yellow: usize = px.chunks(4).filter(|p| p[..3] == [255, 220, 0]).count();
    assert_eq!(yellow, cl.voxels().filter(|v| v[2] == z).count());

    let all = s.render(
        None,
        Layers {
            gt: true,
            pred: true,
            centerline: true,
        },
    );
    assert_ne!(all, plain);
}
