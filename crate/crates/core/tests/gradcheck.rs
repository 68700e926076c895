mod common;

use tdn_core::archdsl::parse_arch;
use tdn_core::train::{loss_and_grads, ModelParams};

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut kinds = std::collections::BTreeSet::new();
    let (mut skipped, mut sampled) = (0, 0);
    for seed in 0..10 {
        let r = common::gradcheck(seed);
        assert!(r.worst < 1e-3, "seed {seed}: relative error {:.3e} {:?}\n{}", r.worst, r.per_tensor, r.text);
        assert_eq!(r.unchecked, 0, "seed {seed}: a tensor had every probe on a kink\n{}", r.text);
        kinds.extend(r.kinds);
        skipped += r.skipped;
        sampled += r.sampled;
    }
    assert!(skipped * 5 < sampled, "{skipped} of {sampled} probes crossed a kink");
    for k in ["conv", "dwconv", "maxpool", "add", "gap", "dense", "softmax"] {
        assert!(kinds.contains(k), "no net exercised {k}");
    }
}

#[test]
fn uniform_prediction_loss_is_ln6() {
    let g = parse_arch("input 4 4 1\ngap g\ndense d units=6\nsoftmax s\n").unwrap().infer_shapes().unwrap();
    let p = ModelParams::zeros(&g).unwrap();
    let r = loss_and_grads(&g, &p, &[0.5; 32], &[0, 5]).unwrap();
    assert!((r.loss as f64 - 6f64.ln()).abs() < 1e-3);
}

#[test]
fn duplicated_batch_keeps_loss() {
    let g = parse_arch("input 6 6 1\nconv c k=3 f=3 bn=1\nmaxpool p k=2 s=2\ngap g\ndense d units=4\n")
        .unwrap()
        .infer_shapes()
        .unwrap();
    let p = ModelParams::init(&g, 5).unwrap();
    let images: Vec<f32> = (0..72).map(|i| ((i * 37) % 17) as f32 / 17.0).collect();
    let once = loss_and_grads(&g, &p, &images, &[1, 3]).unwrap();
    let twice_images = [images.clone(), images].concat();
    let twice = loss_and_grads(&g, &p, &twice_images, &[1, 3, 1, 3]).unwrap();
    assert!((once.loss - twice.loss).abs() < 1e-5, "{} vs {}", once.loss, twice.loss);
}
