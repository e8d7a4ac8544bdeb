//! Matching quality of pretrained stand-in backbones on held-out textures.

use matres_core::experiment::Pretraining;
use matres_core::geometry::{estimate_transform, EstimateConfig, RansacConfig};
use matres_core::prior::{correspondence_accuracy, pretrain_matcher, BackboneConfig, BackboneKind, PriorBackbone};
use matres_core::Image;

fn pretrained(kind: BackboneKind) -> (PriorBackbone, Vec<Image>) {
    let p = Pretraining::default();
    let scenes = p.training_scenes();
    let held = scenes[scenes.len() - scenes.len().div_ceil(4)..].to_vec();
    let m = pretrain_matcher(BackboneConfig { kind, ..p.backbone.clone() }, p.seed, &p.matcher, &scenes).unwrap();
    (m, held)
}

fn crop(img: &Image, y0: usize, x0: usize, size: usize) -> Image {
    Image::from_fn(img.channels(), size, size, |c, y, x| img.get(c, y0 + y, x0 + x))
}

#[test]
fn conv_trunk_recovers_translations_for_most_cells() {
    let (m, held) = pretrained(BackboneKind::Diffusion);
    let acc = correspondence_accuracy(&m, &held, 4).unwrap();
    assert!(acc >= 0.8, "accuracy {acc}");
}

#[test]
fn default_matcher_passes_its_gate_and_recovers_a_planted_translation() {
    let (m, held) = pretrained(BackboneKind::PatchToken);
    let acc = correspondence_accuracy(&m, &held, 4).unwrap();
    assert!(acc >= Pretraining::default().matcher.min_accuracy, "accuracy {acc}");
    let (dx, dy) = (4usize, 6usize);
    let cfg = EstimateConfig { stride: m.stride(), ransac: RansacConfig::default() };
    for scene in &held {
        // source pixel p shows the scene at p + d, target pixel p at p
        let src = crop(scene, dy, dx, 56);
        let tgt = crop(scene, 0, 0, 56);
        let est = estimate_transform(&m.extract_prior(&src).unwrap(), &m.extract_prior(&tgt).unwrap(), &cfg).unwrap();
        let (x, y) = est.transform.apply(28.0, 28.0).unwrap();
        let stride = m.stride() as f64;
        assert!((x - (28.0 + dx as f64)).abs() <= stride && (y - (28.0 + dy as f64)).abs() <= stride, "{x} {y}");
    }
}
