use proptest::prelude::*;

use super::*;
use crate::encoders::{select_student_head, select_teacher_head, InputShape, ModelConfig};
use crate::grads::finite_diff_grad;
use crate::numcore::RngStream;

fn eye2() -> EmbeddingBatch<f64> {
    EmbeddingBatch::try_normalized(Matrix::identity(2)).unwrap()
}

fn random_batch(n: usize, d: usize, rng: &mut RngStream) -> EmbeddingBatch<f64> {
    EmbeddingBatch::from_raw(&Matrix::from_fn(n, d, |_, _| rng.normal()))
}

fn dist(rows: &[[f64; 2]], direction: Direction) -> ContrastiveDistribution<f64> {
    ContrastiveDistribution {
        probs: Matrix::from_rows(rows).unwrap(),
        direction,
        temperature: 1.0,
    }
}

#[test]
fn clip_loss_of_identity_pairs() {
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let got = clip_loss(&eye2(), &eye2(), 1.0).unwrap();
    assert!((got - expected).abs() < 1e-15);
    assert!((got - 0.31326169).abs() < 5e-9);
}

#[test]
fn single_pair_losses_vanish() {
    let mut r = RngStream::new(1, 0);
    let a = random_batch(1, 4, &mut r);
    let b = random_batch(1, 4, &mut r);
    assert_eq!(clip_loss(&a, &b, 0.07).unwrap(), 0.0);
    assert_eq!(icl_loss(&a, &b, &b, &a, 0.07).unwrap(), 0.0);
}

#[test]
fn clip_loss_rejects_bad_inputs() {
    let mut r = RngStream::new(1, 0);
    let a = random_batch(3, 4, &mut r);
    let b = random_batch(2, 4, &mut r);
    assert!(clip_loss(&a, &b, 1.0).is_err());
    let raw = EmbeddingBatch::unnormalized(Matrix::from_rows(&[[2.0, 0.0]]).unwrap());
    assert!(clip_loss(&raw, &raw, 1.0).is_err());
    assert!(clip_loss(&a, &a, 0.0).is_err());
    assert!(EmbeddingBatch::try_normalized(Matrix::<f64>::zeros(0, 3)).is_err());
    assert!(EmbeddingBatch::try_normalized(Matrix::<f64>::from_rows(&[[0.5, 0.5]]).unwrap()).is_err());
}

#[test]
fn contrastive_distribution_examples() {
    let d = contrastive_distribution(&eye2(), &eye2(), 1.0, Direction::ImageToText).unwrap();
    let hi = 1.0 / (1.0 + (-1.0f64).exp());
    for (got, want) in d.probs.as_slice().iter().zip([hi, 1.0 - hi, 1.0 - hi, hi]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((d.probs[(0, 0)] - 0.7311).abs() < 5e-5);

    let mut r = RngStream::new(2, 0);
    let a = random_batch(4, 3, &mut r);
    let flat = contrastive_distribution(&a, &a, 1e6, Direction::TextToImage).unwrap();
    for x in flat.probs.as_slice() {
        assert!((x - 0.25).abs() < 1e-5);
    }
}

#[test]
fn crd_hand_examples() {
    use Direction::*;
    let t = dist(&[[1.0, 0.0], [0.0, 1.0]], ImageToText);
    let q = dist(&[[0.6, 0.4], [0.3, 0.7]], TextToImage);
    let s = dist(&[[0.5, 0.5], [0.0, 1.0]], ImageToText);
    let got = crd_loss(&t, &q, &s, &q).unwrap();
    assert!((got - 0.5 * 2f64.ln()).abs() < 1e-15);
    assert_eq!(crd_loss(&t, &q, &t, &q).unwrap(), 0.0);

    // zero student probability under positive teacher mass is floored
    let zero = dist(&[[0.0, 1.0], [0.0, 1.0]], ImageToText);
    let (v, clamped) = crd_loss_counted(&t, &q, &zero, &q).unwrap();
    assert_eq!(clamped, 1);
    assert!(v.is_finite() && v > 30.0);
    assert!(crd_loss(&t, &q, &dist(&[[1.0, 0.0]], ImageToText), &q).is_err());
}

#[test]
fn fd_hand_examples() {
    let swapped = EmbeddingBatch::try_normalized(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
    assert_eq!(fd_loss(&eye2(), &swapped, &eye2(), &eye2()).unwrap(), 2.0);
    assert_eq!(fd_loss(&eye2(), &eye2(), &eye2(), &eye2()).unwrap(), 0.0);
    let mut r = RngStream::new(4, 0);
    let a = random_batch(3, 2, &mut r);
    assert!(fd_loss(&eye2(), &a, &eye2(), &eye2()).is_err());
}

#[test]
fn icl_with_student_as_teacher_is_clip() {
    let mut r = RngStream::new(5, 0);
    let v = random_batch(6, 5, &mut r);
    let s = random_batch(6, 5, &mut r);
    let a = icl_loss(&v, &s, &v, &s, 0.1).unwrap();
    let b = clip_loss(&v, &s, 0.1).unwrap();
    assert!((a - b).abs() < 1e-12);
    let i = icl_loss(&eye2(), &eye2(), &eye2(), &eye2(), 1.0).unwrap();
    assert!((i - 0.31326169).abs() < 5e-9);
}

fn clip_with_heads() -> (ClipModel<f64>, [EmbeddingBatch<f64>; 4]) {
    let model = ClipModel::new(
        &ModelConfig { width: 4, blocks: 1, embed_dim: 3, init_tau: 0.07 },
        InputShape { positions: 2, in_dim: 2 },
        InputShape { positions: 2, in_dim: 2 },
        1,
    );
    let mut r = RngStream::new(6, 0);
    let batches = [0, 1, 2, 3].map(|_| random_batch(5, 3, &mut r));
    (model, batches)
}

#[test]
fn afd_reductions() {
    let (mut model, [sv, ss, tv, ts]) = clip_with_heads();
    assert!(afd_loss(&model, &sv, &ss, &tv, &ts, 0.1).unwrap_err().is_config());
    model.fusion_image = Some(select_student_head(3, 3));
    model.fusion_text = Some(select_student_head(3, 3));
    let a = afd_loss(&model, &sv, &ss, &tv, &ts, 0.1).unwrap();
    assert!((a - clip_loss(&sv, &ss, 0.1).unwrap()).abs() < 1e-12);
    model.fusion_image = Some(select_teacher_head(3, 3));
    model.fusion_text = Some(select_teacher_head(3, 3));
    let a = afd_loss(&model, &sv, &ss, &tv, &ts, 0.1).unwrap();
    assert!((a - clip_loss(&tv, &ts, 0.1).unwrap()).abs() < 1e-12);
}

#[test]
fn gd_vanishes_for_identical_models() {
    let (_, [v, s, _, _]) = clip_with_heads();
    for mode in [GdMode::TotalLoss, GdMode::AnchorOwn] {
        assert_eq!(gd_loss(&v, &s, &v, &s, 0.07, 0.07, mode).unwrap(), 0.0);
    }
}

#[test]
fn gd_matches_finite_difference_gradient_fields() {
    let (_, [sv, ss, tv, ts]) = clip_with_heads();
    let (tau_t, tau_s) = (0.07, 0.2);
    let field = |v: &EmbeddingBatch<f64>, s: &EmbeddingBatch<f64>, tau: f64| {
        let (n, d) = (v.n(), v.d());
        let loss = |a: &[f64], b: &[f64]| {
            let a = EmbeddingBatch::unnormalized(Matrix::from_vec(n, d, a.to_vec()).unwrap());
            let b = EmbeddingBatch::unnormalized(Matrix::from_vec(n, d, b.to_vec()).unwrap());
            0.5 * (info_nce(&a, &b, tau).unwrap() + info_nce(&b, &a, tau).unwrap())
        };
        let gv = finite_diff_grad(|x| loss(x, s.rows().as_slice()), v.rows().as_slice(), 1e-5);
        let gs = finite_diff_grad(|x| loss(v.rows().as_slice(), x), s.rows().as_slice(), 1e-5);
        (gv, gs)
    };
    let (tgv, tgs) = field(&tv, &ts, tau_t);
    let (sgv, sgs) = field(&sv, &ss, tau_s);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let oracle = (sq(&tgv, &sgv) + sq(&tgs, &sgs)) / sv.n() as f64;
    let got = gd_loss(&tv, &ts, &sv, &ss, tau_t, tau_s, GdMode::TotalLoss).unwrap();
    assert!(((got - oracle) / oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn weights_and_terms() {
    let w = KdWeights::default();
    assert_eq!((w.crd, w.fd, w.mfd, w.gd, w.icl), (1.0, 2000.0, 2000.0, 1e8, 1.0));
    assert!(w.active().is_empty());
    let u = KdWeights::unified();
    assert_eq!(u.active(), vec![KdTerm::Crd, KdTerm::Fd, KdTerm::Icl]);
    for t in KdTerm::ALL {
        assert_eq!(KdTerm::parse(t.name()), Some(t));
        assert_eq!(t.to_string(), t.name());
    }
    assert_eq!(KdTerm::parse("nope"), None);
    let mut bad = KdWeights::default();
    bad.set_weight(KdTerm::Gd, -1.0);
    assert!(bad.validate().unwrap_err().is_config());
}

fn combined_inputs() -> (ClipModel<f64>, [EmbeddingBatch<f64>; 5]) {
    let (mut model, [sv, ss, tv, ts]) = clip_with_heads();
    model = model.with_fusion(3, 2);
    let mut r = RngStream::new(7, 0);
    let mv = random_batch(5, 3, &mut r);
    (model, [sv, ss, mv, tv, ts])
}

#[test]
fn combined_loss_bookkeeping() {
    let (model, [sv, ss, mv, tv, ts]) = combined_inputs();
    let x = KdInputs {
        model: &model,
        student_v: &sv,
        student_s: &ss,
        masked_student_v: Some(&mv),
        teacher_v: &tv,
        teacher_s: &ts,
        tau_student: 0.1,
        tau_teacher: 0.05,
        gd_mode: GdMode::TotalLoss,
    };
    let all = KdWeights::with(&KdTerm::ALL);
    let b = combined_loss(&all, &x).unwrap();
    assert_eq!(b.terms.len(), 6);
    assert!((b.total - b.recompute_total(&all)).abs() <= 1e-9 * b.total.abs().max(1.0));
    assert!(b.terms.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));

    let mut zero = all.clone();
    for t in KdTerm::ALL {
        zero.set_weight(t, 0.0);
    }
    let z = combined_loss(&zero, &x).unwrap();
    assert_eq!(z.total, z.task);
    assert_eq!(z.task, clip_loss(&sv, &ss, 0.1).unwrap());

    let none = combined_loss(&KdWeights::default(), &x).unwrap();
    assert!(none.terms.is_empty() && none.total == none.task);

    let no_mask = KdInputs { masked_student_v: None, ..x };
    assert!(combined_loss(&KdWeights::with(&[KdTerm::Mfd]), &no_mask).unwrap_err().is_config());
}

#[test]
fn mfd_equals_fd_for_unmasked_forward() {
    let (_, [sv, ss, _, tv, ts]) = combined_inputs();
    let copy = sv.clone();
    assert_eq!(
        mfd_loss(&tv, &copy, &ts, &ss).unwrap().to_bits(),
        fd_loss(&tv, &sv, &ts, &ss).unwrap().to_bits()
    );
    assert_eq!(mfd_loss(&tv, &tv, &ts, &ts).unwrap(), 0.0);
}

#[test]
fn f32_losses_track_f64() {
    let (_, [sv, ss, _, tv, ts]) = combined_inputs();
    let a = clip_loss(&sv, &ss, 0.1).unwrap();
    let b = clip_loss(&sv.cast::<f32>(), &ss.cast::<f32>(), 0.1f32).unwrap();
    assert!((a - b as f64).abs() < 1e-5);
    let a = fd_loss(&tv, &sv, &ts, &ss).unwrap();
    let b = fd_loss(&tv.cast::<f32>(), &sv.cast::<f32>(), &ts.cast::<f32>(), &ss.cast::<f32>()).unwrap();
    assert!((a - b as f64).abs() < 1e-5);
}

fn batches(n: usize) -> impl Strategy<Value = (u64, usize)> {
    (0u64..10_000, Just(n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_permutation_invariant((seed, n) in batches(6), tau in 0.05f64..2.0) {
        let mut r = RngStream::new(seed, 1);
        let [sv, ss, tv, ts] = [0, 1, 2, 3].map(|_| random_batch(n, 4, &mut r));
        let perm = r.permutation(n);
        let p = |b: &EmbeddingBatch<f64>| b.permute(&perm);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        prop_assert!(close(clip_loss(&sv, &ss, tau).unwrap(), clip_loss(&p(&sv), &p(&ss), tau).unwrap()));
        prop_assert!(close(icl_loss(&sv, &ss, &tv, &ts, tau).unwrap(), icl_loss(&p(&sv), &p(&ss), &p(&tv), &p(&ts), tau).unwrap()));
        prop_assert!(close(fd_loss(&tv, &sv, &ts, &ss).unwrap(), fd_loss(&p(&tv), &p(&sv), &p(&ts), &p(&ss)).unwrap()));
        prop_assert!(close(
            crd_from_embeddings(&tv, &ts, &sv, &ss, 0.07, tau).unwrap(),
            crd_from_embeddings(&p(&tv), &p(&ts), &p(&sv), &p(&ss), 0.07, tau).unwrap()
        ));
    }

    #[test]
    fn losses_are_finite_nonnegative_and_bounded((seed, n) in batches(5), tau in 0.01f64..3.0) {
        let mut r = RngStream::new(seed, 2);
        let [sv, ss, tv, ts] = [0, 1, 2, 3].map(|_| random_batch(n, 3, &mut r));
        let fd = fd_loss(&tv, &sv, &ts, &ss).unwrap();
        prop_assert!((0.0..=8.0).contains(&fd));
        for v in [
            clip_loss(&sv, &ss, tau).unwrap(),
            icl_loss(&sv, &ss, &tv, &ts, tau).unwrap(),
            crd_from_embeddings(&tv, &ts, &sv, &ss, 0.07, tau).unwrap(),
            gd_loss(&tv, &ts, &sv, &ss, 0.07, tau, GdMode::TotalLoss).unwrap(),
        ] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn crd_is_zero_iff_distributions_match((seed, n) in batches(4), tau in 0.05f64..2.0) {
        let mut r = RngStream::new(seed, 3);
        let [sv, ss, tv, ts] = [0, 1, 2, 3].map(|_| random_batch(n, 3, &mut r));
        prop_assert_eq!(crd_from_embeddings(&sv, &ss, &sv, &ss, tau, tau).unwrap(), 0.0);
        prop_assert!(crd_from_embeddings(&tv, &ts, &sv, &ss, tau, tau).unwrap() > 0.0);
    }

    #[test]
    fn distributions_are_stochastic((seed, n) in batches(5), tau in 0.01f64..10.0) {
        let mut r = RngStream::new(seed, 4);
        let [a, b] = [0, 1].map(|_| random_batch(n, 3, &mut r));
        let d = contrastive_distribution(&a, &b, tau, Direction::ImageToText).unwrap();
        for row in d.probs.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
