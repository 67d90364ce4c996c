use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdd_core::camera::{estimate_homography_ransac, Correspondence, Homography, RansacParams};

fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
    let a = rng.random_range(-0.15..0.15);
    let s = rng.random_range(0.9..1.1);
    let (c, sn) = (s * f64::cos(a), s * f64::sin(a));
    Homography::from_matrix([
        [c + rng.random_range(-0.05..0.05), -sn, rng.random_range(-5.0..5.0)],
        [sn, c + rng.random_range(-0.05..0.05), rng.random_range(-5.0..5.0)],
        [rng.random_range(-5e-4..5e-4), rng.random_range(-5e-4..5e-4), 1.0],
    ])
    .unwrap()
}

fn scene(rng: &mut ChaCha8Rng, h: &Homography) -> (Vec<Correspondence>, usize) {
    let mut m = Vec::new();
    for _ in 0..70 {
        let p = [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)];
        let (x, y) = h.apply(p[0], p[1]).unwrap();
        m.push(Correspondence { p, q: [x, y] });
    }
    for _ in 0..30 {
        m.push(Correspondence {
            p: [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)],
            q: [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)],
        });
    }
    (m, 70)
}

fn mean_reprojection(h: &Homography, m: &[Correspondence]) -> f64 {
    m.iter()
        .map(|c| {
            let (x, y) = h.apply(c.p[0], c.p[1]).unwrap();
            ((x - c.q[0]).powi(2) + (y - c.q[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / m.len() as f64
}

#[test]
fn recovers_homography_with_thirty_percent_outliers() {
    let mut ok = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let truth = random_homography(&mut rng);
        let (m, n_in) = scene(&mut rng, &truth);
        let params = RansacParams {
            seed: trial,
            ..Default::default()
        };
        if let Ok((h, _)) = estimate_homography_ransac(&m, &params) {
            if mean_reprojection(&h, &m[..n_in]) < 0.01 {
                ok += 1;
            }
        }
    }
    assert!(ok >= 99, "{ok}/100");
}

#[test]
fn result_does_not_depend_on_match_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let truth = random_homography(&mut rng);
    let (mut m, _) = scene(&mut rng, &truth);
    let p = RansacParams::default();
    let (h0, in0) = estimate_homography_ransac(&m, &p).unwrap();
    let count0 = in0.iter().filter(|&&b| b).count();
    for _ in 0..5 {
        m.shuffle(&mut rng);
        let (h, inl) = estimate_homography_ransac(&m, &p).unwrap();
        assert_eq!(h, h0);
        assert_eq!(inl.iter().filter(|&&b| b).count(), count0);
    }
}

#[test]
fn too_few_matches_is_an_error() {
    let m = vec![Correspondence { p: [0.0, 0.0], q: [1.0, 1.0] }; 3];
    assert!(estimate_homography_ransac(&m, &RansacParams::default()).is_err());
}
