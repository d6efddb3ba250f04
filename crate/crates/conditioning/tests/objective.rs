use rand::Rng;
use rand_distr::StandardNormal;
use uniavatar_conditioning::*;
use uniavatar_core::rng::stream;
use uniavatar_core::{Graph, Tensor};

fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn schedule_matches_cumulative_product() {
    let s = DiffusionSchedule::linear(&ScheduleConfig { steps: 10, beta_start: 1e-4, beta_end: 0.02 }).unwrap();
    let mut prod = 1.0;
    for t in 1..=10 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 9.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t).unwrap() - prod).abs() <= 1e-12);
    }
    for cfg in [ScheduleConfig::desk(), ScheduleConfig::paper()] {
        let s = DiffusionSchedule::linear(&cfg).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }
    for (b1, bt) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
        assert!(DiffusionSchedule::linear(&ScheduleConfig { steps: 10, beta_start: b1, beta_end: bt }).is_err());
    }
}

#[test]
fn diffusion_forward_cases() {
    let s = DiffusionSchedule::linear(&ScheduleConfig::desk()).unwrap();
    let x0 = [0.3, -0.7, 1.0];
    let z = diffusion_forward(&x0, 5, &[0.0; 3], &s).unwrap();
    let a = s.alpha_bar(5).unwrap().sqrt();
    for (zi, xi) in z.iter().zip(x0) {
        assert_eq!(*zi, a * xi);
    }
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    assert!(diffusion_forward(&x0, 0, &[0.0; 3], &s).is_err());
    assert!(diffusion_forward(&x0, 51, &[0.0; 3], &s).is_err());
    assert!(diffusion_forward(&x0, 1, &[0.0; 2], &s).is_err());
}

#[test]
fn forward_process_second_moment() {
    let s = DiffusionSchedule::linear(&ScheduleConfig::desk()).unwrap();
    let mut rng = stream(8, "moment", 0);
    let d = 16;
    let x0 = randn(&mut rng, d);
    let x2: f64 = x0.iter().map(|v| v * v).sum();
    for t in [1, 10, 25, 50] {
        let ab = s.alpha_bar(t).unwrap();
        let want = ab * x2 + (1.0 - ab) * d as f64;
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                let eps = randn(&mut rng, d);
                diffusion_forward(&x0, t, &eps, &s).unwrap().iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean / want - 1.0).abs() <= 0.05, "t={t} {mean} vs {want}");
    }
}

#[test]
fn latent_loss_cases() {
    let mut rng = stream(1, "mse", 0);
    let a = randn(&mut rng, 48);
    let b = randn(&mut rng, 48);
    let mut g = Graph::new();
    let av = g.constant(Tensor::from_vec(&[3, 4, 4], a.clone()));
    let bv = g.constant(Tensor::from_vec(&[3, 4, 4], b.clone()));
    let same = loss_latent(&mut g, av, av).unwrap();
    assert_eq!(g.value(same).item(), Some(0.0));
    let shifted = g.offset(av, 0.25);
    let d = loss_latent(&mut g, av, shifted).unwrap();
    assert!((g.value(d).item().unwrap() - 0.0625).abs() < 1e-15);
    let l = loss_latent(&mut g, av, bv).unwrap();
    let want = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 48.0;
    assert!((g.value(l).item().unwrap() - want).abs() <= 1e-12);
    let wrong = g.constant(Tensor::zeros(&[48]));
    assert!(loss_latent(&mut g, av, wrong).is_err());
}

#[test]
fn spatial_weight_endpoints() {
    for steps in [50, 1000, 10] {
        assert_eq!(spatial_weight(0, steps).unwrap(), 1.0);
        assert!((spatial_weight(steps / 2, steps).unwrap() - 0.5f64.sqrt()).abs() <= 1e-12);
        assert_eq!(spatial_weight(steps, steps).unwrap(), 0.0);
        let w: Vec<f64> = (0..=steps).map(|t| spatial_weight(t, steps).unwrap()).collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        for t in 0..=steps {
            let c = (t as f64 * std::f64::consts::PI / (2.0 * steps as f64)).cos();
            assert!((w[t] - c).abs() <= 1e-15);
        }
    }
    assert!(spatial_weight(11, 10).is_err());
}

#[test]
fn spatial_loss_cases() {
    let p = Perceptual::new([8, 16, 16]);
    let mut rng = stream(2, "img", 0);
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(&[3, 32, 32], randn(&mut rng, 3 * 1024)).map(f64::tanh));
    let b = g.constant(Tensor::from_vec(&[3, 32, 32], randn(&mut rng, 3 * 1024)).map(f64::tanh));
    let at_end = loss_spatial(&mut g, a, b, 50, 50, &p).unwrap();
    assert_eq!(g.value(at_end).item(), Some(0.0));
    for t in [1, 20, 49] {
        let same = loss_spatial(&mut g, a, a, t, 50, &p).unwrap();
        assert_eq!(g.value(same).item(), Some(0.0));
    }
    let d = p.distance(&mut g, a, b).unwrap();
    let d = g.value(d).item().unwrap();
    assert!(d > 0.0);
    let mid = loss_spatial(&mut g, a, b, 25, 50, &p).unwrap();
    assert!((g.value(mid).item().unwrap() - 0.5f64.sqrt() * d).abs() <= 1e-12);
    assert!(loss_spatial(&mut g, a, b, 0, 50, &p).is_err());
}

#[test]
fn total_loss_is_additive() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::scalar(0.5));
    let s = g.constant(Tensor::scalar(0.2));
    let t = loss_total(&mut g, l, s, 0.1).unwrap();
    assert!((g.value(t).item().unwrap() - 0.52).abs() < 1e-15);
    assert_eq!(g.value(t).item().unwrap(), 0.5 + 0.1 * 0.2);
    let t0 = loss_total(&mut g, l, s, 0.0).unwrap();
    assert_eq!(g.value(t0).item(), Some(0.5));
    let z = g.constant(Tensor::scalar(0.0));
    let tz = loss_total(&mut g, z, z, 0.1).unwrap();
    assert_eq!(g.value(tz).item(), Some(0.0));
    assert!(loss_total(&mut g, l, s, -1.0).is_err());
}
