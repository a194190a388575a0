mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::{check_gradient, random, scalar, values};
use ralf_core::dataset::TripletConfig;
use ralf_core::geometry::{Modality, Pose2};
use ralf_net::params::ParamStore;
use ralf_net::place::{
    pr_loss, pr_loss_terms, pr_loss_weighted, triplet_loss, DescriptorHead, PairDescriptors, COMBINATIONS,
};

fn rows(v: &[Vec<f64>]) -> Tensor {
    let k = v[0].len();
    Tensor::from_vec(v.concat(), (v.len(), k), &Device::Cpu).unwrap()
}

fn head(in_dim: usize, widths: [usize; 4], dtype: DType) -> DescriptorHead {
    let mut ps = ParamStore::new(5, dtype).unwrap();
    DescriptorHead::new(&mut ps, "head", in_dim, widths).unwrap()
}

#[test]
fn full_features_give_unit_128_descriptor() {
    let h = head(256, [256, 128, 128, 128], DType::F32);
    let f = random(&[2, 256, 32, 32], 1).to_dtype(DType::F32).unwrap();
    let d = h.forward(&f, false).unwrap();
    assert_eq!(d.dims(), &[2, 128]);
    for row in d.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "norm {n}");
    }
    assert_eq!(values(&d), values(&h.forward(&f, false).unwrap()));
}

#[test]
fn random_inputs_give_unit_norm() {
    let h = head(16, [16, 8, 8, 8], DType::F64);
    for seed in 0..5 {
        let d = h.forward(&random(&[3, 16, 8, 8], seed), false).unwrap();
        for row in d.to_vec2::<f64>().unwrap() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn triplet_loss_hand_cases() {
    let t = |a: [f64; 2], p: [f64; 2], n: [f64; 2], m: f64| {
        scalar(
            &triplet_loss(&rows(&[a.to_vec()]), &rows(&[p.to_vec()]), &rows(&[n.to_vec()]), m)
                .unwrap()
                .sum_all()
                .unwrap(),
        )
    };
    assert_eq!(t([0.0, 0.0], [0.0, 0.0], [0.6, 0.0], 0.5), 0.0);
    assert!((t([0.0, 0.0], [0.7, 0.0], [0.0, 0.4], 0.5) - 0.8).abs() < 1e-6);
    assert!((t([0.3, 0.4], [0.3, 0.4], [0.3, 0.4], 0.5) - 0.5).abs() < 1e-6);
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    let a = Var::from_tensor(&random(&[4, 6], 1)).unwrap();
    let p = random(&[4, 6], 2);
    let n = random(&[4, 6], 3);
    let count = check_gradient(
        &a,
        |t| triplet_loss(t, &p, &n, 0.5).unwrap().mean_all().unwrap(),
        24,
        1e-3,
    );
    assert!(count >= 12);
}

fn places(n: usize) -> Vec<Pose2<f64>> {
    (0..n).map(|i| Pose2::new(100.0 * i as f64, 0.0, 0.0)).collect()
}

fn batch<'a>(
    ra: &'a Tensor,
    la: &'a Tensor,
    rp: &'a Tensor,
    lp: &'a Tensor,
    poses: &'a [Pose2<f64>],
) -> PairDescriptors<'a> {
    PairDescriptors {
        radar_anchor: ra,
        lidar_anchor: la,
        radar_positive: rp,
        lidar_positive: lp,
        anchor_poses: poses,
        positive_poses: poses,
    }
}

#[test]
fn separated_places_give_zero_loss() {
    let one_hot: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let d = rows(&one_hot);
    let poses = places(4);
    let loss = pr_loss(&batch(&d, &d, &d, &d, &poses), &TripletConfig::default()).unwrap();
    assert_eq!(scalar(&loss), 0.0);
}

#[test]
fn identical_descriptors_give_eight_margins() {
    let d = rows(&vec![vec![0.6, 0.8]; 4]);
    let poses = places(4);
    let loss = pr_loss(&batch(&d, &d, &d, &d, &poses), &TripletConfig::default()).unwrap();
    assert!((scalar(&loss) - 4.0).abs() < 1e-6, "{}", scalar(&loss));
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn each_term_is_a_plain_triplet_mean() {
    let b = 5;
    let descs: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|s| {
            let t = random(&[b, 8], 20 + s);
            t.to_vec2::<f64>().unwrap()
        })
        .collect();
    let [ra, la, rp, lp] = [0, 1, 2, 3].map(|i| rows(&descs[i]));
    let poses: Vec<Pose2<f64>> = (0..b).map(|i| Pose2::new(3.0 * i as f64, 0.0, 0.0)).collect();
    let cfg = TripletConfig {
        margin: 0.5,
        tau_p: 2.0,
        tau_n: 4.0,
    };
    let pairs = batch(&ra, &la, &rp, &lp, &poses);
    let terms = pr_loss_terms(&pairs, &cfg).unwrap();
    let pick = |m: Modality, anchor: bool| -> &Vec<Vec<f64>> {
        match (m, anchor) {
            (Modality::Radar, true) => &descs[0],
            (Modality::Lidar, true) => &descs[1],
            (Modality::Radar, false) => &descs[2],
            (Modality::Lidar, false) => &descs[3],
        }
    };
    for (k, [ma, mp, mn]) in COMBINATIONS.iter().enumerate() {
        let mut expected = 0.0;
        for i in 0..b {
            let a = &pick(*ma, true)[i];
            let p = &pick(*mp, false)[i];
            let pool: Vec<(&Vec<f64>, Pose2<f64>)> = pick(*mn, true)
                .iter()
                .zip(poses.iter().copied())
                .chain(pick(*mn, false).iter().zip(poses.iter().copied()))
                .collect();
            let neg = pool
                .iter()
                .filter(|(_, q)| q.distance(&poses[i]) > cfg.tau_n)
                .map(|(d, _)| *d)
                .min_by(|x, y| dist(a, x).partial_cmp(&dist(a, y)).unwrap())
                .unwrap();
            expected += (dist(a, p) - dist(a, neg) + cfg.margin).max(0.0) / b as f64;
        }
        assert!((scalar(&terms[k]) - expected).abs() < 1e-6, "term {k}");
        let mut w = [0.0; 8];
        w[k] = 1.0;
        let single = scalar(&pr_loss_weighted(&pairs, &cfg, &w).unwrap());
        assert!((single - expected).abs() < 1e-6);
    }
    let total = scalar(&pr_loss(&pairs, &cfg).unwrap());
    assert!(total >= 0.0);
    assert!((total - terms.iter().map(scalar).sum::<f64>()).abs() < 1e-9);
}

#[test]
fn pr_loss_fails_without_negatives() {
    let d = rows(&vec![vec![1.0, 0.0]; 2]);
    let poses = vec![Pose2::new(0.0, 0.0, 0.0); 2];
    assert!(pr_loss(&batch(&d, &d, &d, &d, &poses), &TripletConfig::default()).is_err());
}

#[test]
fn descriptor_gradient_matches_finite_differences() {
    let h = head(8, [8, 8, 8, 6], DType::F64);
    let f = Var::from_tensor(&random(&[2, 8, 8, 8], 4)).unwrap();
    let w = random(&[2, 6], 5);
    let n = check_gradient(
        &f,
        |t| (h.forward(t, false).unwrap() * &w).unwrap().sum_all().unwrap(),
        32,
        1e-3,
    );
    assert!(n >= 16, "only {n} entries compared");
}
