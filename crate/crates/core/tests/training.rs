use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xcorr::dataset::{generate_dataset, CropSpec, Manifest, VariationSpec, VolumeSource};
use xcorr::geometry::{Detector, ProjectionMode};
use xcorr::matcher::{
    bias_matrix, extract_patches, load_checkpoint, load_examples, mse_loss, save_checkpoint,
    train_correspondence, Example, MatcherConfig, MatcherModel, TokenSequence,
};
use xcorr::metrics::average_precision;
use xcorr::phantom::random_limb;

fn tiny_dataset(dir: &std::path::Path, volumes: u64) -> Manifest {
    let var = VariationSpec {
        mode: ProjectionMode::Cone,
        view1_angles_rad: [[-0.2, 0.2], [-0.2, 0.2], [0.0, 0.0]],
        view2_angles_rad: [[-0.2, 0.2], [1.3, 1.8], [0.0, 0.0]],
        source_distance_mm: [60.0, 80.0],
        detector: Detector {
            nu: 16,
            nv: 16,
            du: 1.5,
            dv: 1.5,
            distance: 30.0,
        },
        crop: CropSpec::default(),
        pairs_per_volume: 2,
        seed: 21,
        split: [1.0, 0.0, 0.0],
    };
    let sources: Vec<VolumeSource> = (0..volumes)
        .map(|i| VolumeSource::Phantom(random_limb([16; 3], [1.0; 3], 300 + i, None)))
        .collect();
    generate_dataset(&sources, &var, 4, dir).unwrap()
}

fn small_config(epochs: usize) -> MatcherConfig {
    MatcherConfig {
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        head_dim: 8,
        layers: 1,
        epochs,
        batch_size: 10,
        seed: 3,
        ..MatcherConfig::default()
    }
}

fn mean_mse(model: &MatcherModel, examples: &[Example]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|e| mse_loss(&model.predict_correspondence(&e.view1, &e.view2).unwrap(), &e.target()))
        .sum();
    total / examples.len() as f64
}

#[test]
fn overfits_ten_samples() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let train = load_examples(dir.path(), &m, None, 4).unwrap();
    assert_eq!(train.len(), 10);
    let constant: f64 = train
        .iter()
        .map(|e| {
            let t = e.target();
            mse_loss(&Array2::from_elem(t.dim(), 0.5), &t)
        })
        .sum::<f64>()
        / train.len() as f64;

    let r = train_correspondence(MatcherModel::new(&small_config(150)).unwrap(), &train, &[], 3e-3).unwrap();
    assert!(r.diverged.is_none());
    let fit = mean_mse(&r.model, &train);
    assert!(fit < 0.1 * constant, "fit {fit:e} vs constant {constant:e}");
    let losses: Vec<f64> = r.history.iter().map(|h| h.train_loss).collect();
    // One full batch per epoch; after a short warm start the curve only falls.
    assert!(losses[5..].windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn same_seed_same_curve_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 3);
    let train = load_examples(dir.path(), &m, None, 4).unwrap();
    let run = || train_correspondence(MatcherModel::new(&small_config(4)).unwrap(), &train, &[], 5e-3).unwrap();
    let (a, b) = (run(), run());
    let curve = |r: &xcorr::matcher::TrainResult| -> Vec<u64> {
        r.history.iter().map(|h| h.train_loss.to_bits()).collect()
    };
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(a.model.flatten(), b.model.flatten());

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a.model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let e = &train[0];
    let p = a.model.predict_correspondence(&e.view1, &e.view2).unwrap();
    let q = back.predict_correspondence(&e.view1, &e.view2).unwrap();
    let worst = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

fn ramp(n: usize, offset: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + offset) * 0.41).cos().abs()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_with_bias(seed in any::<u64>()) {
        let cfg = MatcherConfig {
            patch_size: 2,
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            layers: 2,
            alpha_init: 0.7,
            seed,
            ..MatcherConfig::default()
        };
        let model = MatcherModel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = extract_patches(&ramp(36, rng.gen_range(0.0..5.0)), 6, 6, 2).unwrap();
        let b = extract_patches(&ramp(36, rng.gen_range(0.0..5.0)), 6, 6, 2).unwrap();
        let seq = TokenSequence::new(&[(&a, 0), (&b, 1)], true).unwrap();
        let c = Array2::from_shape_simple_fn((9, 9), || rng.gen_range(0.0..1.0));
        let bias = bias_matrix(&seq, &c).unwrap();
        let (out, _) = model.forward(&seq, Some(&bias)).unwrap();

        // Shuffle all image tokens across both views, carrying positions,
        // view ids, and bias rows and columns along.
        let n = seq.views.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut p = seq.clone();
        for (dst, &src) in perm.iter().enumerate() {
            p.patches.row_mut(dst).assign(&seq.patches.row(src));
            p.positions[dst] = seq.positions[src];
            p.views[dst] = seq.views[src];
        }
        let full = |i: usize| if i == 0 { 0 } else { perm[i - 1] + 1 };
        let pbias = Array2::from_shape_fn(bias.dim(), |(i, j)| bias[[full(i), full(j)]]);
        let (pout, _) = model.forward(&p, Some(&pbias)).unwrap();
        for i in 0..=n {
            let d = &pout.row(i) - &out.row(full(i));
            prop_assert!(d.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn ap_matches_definition(
        items in prop::collection::vec((0u8..8, any::<bool>()), 1..60),
    ) {
        let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
        let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
        let expected = (!positives.is_empty()).then(|| {
            positives
                .iter()
                .map(|&i| {
                    let above = |j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
                    let ranked = (0..scores.len()).filter(|&j| above(j)).count();
                    let hits = positives.iter().filter(|&&j| above(j)).count();
                    hits as f64 / ranked as f64
                })
                .sum::<f64>()
                / positives.len() as f64
        });
        let got = average_precision(&scores, &labels);
        match (got, expected) {
            (Some(g), Some(e)) => prop_assert!((g - e).abs() < 1e-12, "{} vs {}", g, e),
            (g, e) => prop_assert_eq!(g, e),
        }
    }
}
