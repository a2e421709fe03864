//! Central finite differences against the analytic loss gradients.

use partialseg::label_model::{ChannelMask, ClassSet};
use partialseg::losses::{compatible_ce_pixel, pairwise_loss_pixel, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fd(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn main() -> partialseg::Result<()> {
    let cfg = LossConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_cce, mut worst_pair) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p: Vec<f64> = (0..8).map(|_| r.random_range(0.02..0.98)).collect();
        let y: Vec<f64> = (0..8).map(|_| f64::from(u8::from(r.random_bool(0.3)))).collect();
        let known = ChannelMask::from_bools((0..8).map(|_| r.random_bool(0.6)).collect());
        let an = compatible_ce_pixel(&p, &y, &known, &cfg)?.grad;
        let num = fd(&p, |q| compatible_ce_pixel(q, &y, &known, &cfg).unwrap().value);
        worst_cce = worst_cce.max(max_rel(&an, &num));

        let cond: Vec<f64> = (0..4).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
        let annotated: ClassSet = (0..4).filter(|_| r.random_bool(0.3)).collect();
        let an = pairwise_loss_pixel(&p, &cond, &annotated, &cfg)?.grad;
        let num = fd(&p, |q| pairwise_loss_pixel(q, &cond, &annotated, &cfg).unwrap().value);
        worst_pair = worst_pair.max(max_rel(&an, &num));
    }
    println!("compatible CE   max relative error {worst_cce:.2e}");
    println!("pairwise loss   max relative error {worst_pair:.2e}");
    Ok(())
}
