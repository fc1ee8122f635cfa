mod common;

use common::*;
use conic_core::augment::*;
use conic_core::label_maps::composition_of;
use conic_core::stain_norm::{estimate_stain_model, MacenkoParams};

#[test]
fn flips_and_rotations_preserve_composition() {
    let p = MacenkoParams::default();
    for seed in 0..100u64 {
        let s = random_sample(seed, 24, 10);
        let base = composition_of(&s.instances, &s.classes).unwrap();
        let spec = sample_spec(seed, seed, &AugmentPolicy::default());
        let out = apply(&s, &spec, None, &p).unwrap().sample;
        assert_eq!(composition_of(&out.instances, &out.classes).unwrap(), base, "{spec:?}");
    }
}

#[test]
fn resize_never_invents_labels() {
    let p = MacenkoParams::default();
    for seed in 0..40u64 {
        let s = random_sample(seed, 32, 12);
        for size in [8, 13, 32, 57, 64] {
            let spec = AugmentSpec { target_size: Some(size), ..Default::default() };
            let out = apply(&s, &spec, None, &p).unwrap().sample;
            assert!(out.instances.ids().is_subset(&s.instances.ids()));
            let before: std::collections::BTreeSet<u8> = s.classes.classes_slice().iter().copied().collect();
            assert!(out.classes.classes_slice().iter().all(|c| before.contains(c)));
        }
    }
}

#[test]
fn stain_normalization_only_touches_the_image() {
    let p = MacenkoParams::default();
    let mut r = rng(4);
    let (h, e) = random_stains(&mut r);
    let conc = random_concentrations(&mut r, 48 * 48);
    let image = synthesize(48, h, e, &conc, 255.0);
    let labels = random_sample(4, 48, 8);
    let s = Sample::new(image, labels.instances, labels.classes).unwrap();
    let reference = estimate_stain_model(&synthesize(48, random_stains(&mut r).0, e, &conc, 255.0), &p).unwrap();
    let spec = AugmentSpec { stain_normalize: true, ..Default::default() };
    let out = apply(&s, &spec, Some(&reference), &p).unwrap();
    assert!(out.stain_normalized);
    assert_ne!(out.sample.image, s.image);
    assert_eq!(out.sample.instances, s.instances);
    assert_eq!(out.sample.classes, s.classes);
}

#[test]
fn keyed_sampling_independent_of_visit_order() {
    let policy = AugmentPolicy { p_resize: 0.5, p_stain_normalize: 0.3, ..Default::default() };
    let forward: Vec<_> = (0..200).map(|i| sample_spec(5, i, &policy)).collect();
    let backward: Vec<_> = (0..200).rev().map(|i| sample_spec(5, i, &policy)).collect();
    assert!(forward.iter().eq(backward.iter().rev()));
    assert!(forward.iter().any(|s| s.target_size.is_some()));
    assert!(forward.iter().all(|s| s.target_size.is_none_or(|t| policy.sizes.contains(&t))));
}

#[test]
fn policy_validation() {
    assert!(AugmentPolicy::default().validate().is_ok());
    assert!(AugmentPolicy { p_flip_h: 1.5, ..Default::default() }.validate().is_err());
    assert!(AugmentPolicy { p_resize: 0.5, sizes: vec![], ..Default::default() }.validate().is_err());
}
