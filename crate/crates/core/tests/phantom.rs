use lnsynth_core::components::{label, Connectivity};
use lnsynth_core::conditions::{build_anatomy_mask, AnatomyConfig};
use lnsynth_core::phantom::{generate_phantom, PhantomSpec};
use lnsynth_core::Error;
use proptest::prelude::*;

fn spec(seed: u64) -> PhantomSpec {
    PhantomSpec { grid: [32; 3], seed, ..Default::default() }
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    (s / n as f64, n)
}

#[test]
fn organless_phantom_has_one_node_in_a_body() {
    let s = PhantomSpec { organ_count: 0, node_count_range: [1, 1], ..spec(3) };
    let p = generate_phantom(&s).unwrap();
    let nodes = label(&p.ln_mask.nonzero_mask(), s.grid, Connectivity::TwentySix);
    assert_eq!(nodes.count, 1);
    let cfg = AnatomyConfig { organ_labels: vec![], air_threshold: -500.0, channels: 2 };
    let anat = build_anatomy_mask(&p.anatomy_raw, &p.image, &cfg).unwrap();
    let mut seen: Vec<u16> = anat.data().to_vec();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen, vec![cfg.air_label(), cfg.body_label()]);
}

#[test]
fn generation_is_deterministic() {
    let a = generate_phantom(&spec(11)).unwrap();
    let b = generate_phantom(&spec(11)).unwrap();
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.anatomy_raw.data(), b.anatomy_raw.data());
    assert_eq!(a.ln_mask.data(), b.ln_mask.data());
    let c = generate_phantom(&spec(12)).unwrap();
    assert_ne!(a.image.data(), c.image.data());
}

#[test]
fn derived_air_channel_matches_generator_air() {
    let s = spec(5);
    let p = generate_phantom(&s).unwrap();
    let cfg = AnatomyConfig { organ_labels: vec![1, 2, 3], air_threshold: -500.0, channels: 5 };
    let anat = build_anatomy_mask(&p.anatomy_raw, &p.image, &cfg).unwrap();
    let derived: Vec<bool> = anat.data().iter().map(|l| *l == cfg.air_label()).collect();
    assert_eq!(derived, p.air);
}

#[test]
fn invalid_specs_are_config_errors() {
    for bad in [
        PhantomSpec { grid: [16, 32, 32], ..spec(0) },
        PhantomSpec { node_count_range: [3, 1], ..spec(0) },
        PhantomSpec { node_diameter_range: [2.0, 8.0], ..spec(0) },
        PhantomSpec { node_intensity: (200.0, 5.0), ..spec(0) },
        PhantomSpec { spacing_mm: [1.0, 0.0, 1.0], ..spec(0) },
    ] {
        assert!(matches!(generate_phantom(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nodes_are_separate_from_organs_and_visible(seed in 0u64..10_000) {
        let s = spec(seed);
        let p = generate_phantom(&s).unwrap();
        let shape = s.grid;
        let organ = p.anatomy_raw.nonzero_mask();
        let node = p.ln_mask.nonzero_mask();
        let n = label(&node, shape, Connectivity::TwentySix).count;
        prop_assert!((s.node_count_range[0]..=s.node_count_range[1]).contains(&n));
        let idx = |z: usize, y: usize, x: usize| (z * shape[1] + y) * shape[2] + x;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    if !node[idx(z, y, x)] {
                        continue;
                    }
                    prop_assert!(!p.air[idx(z, y, x)]);
                    for dz in -1isize..=1 {
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let q = [z as isize + dz, y as isize + dy, x as isize + dx];
                                if (0..3).all(|a| q[a] >= 0 && q[a] < shape[a] as isize) {
                                    prop_assert!(!organ[idx(q[0] as usize, q[1] as usize, q[2] as usize)]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let img = p.image.data();
        let (node_mean, _) = mean((0..img.len()).filter(|i| node[*i]).map(|i| img[i] as f64));
        let (body_mean, _) = mean((0..img.len()).filter(|i| !node[*i] && !organ[*i] && !p.air[*i]).map(|i| img[i] as f64));
        let sigma = (s.noise_sigma.powi(2) + s.node_intensity.1.powi(2)).sqrt();
        prop_assert!((node_mean - body_mean).abs() >= 2.0 * sigma);
    }
}
