//! Checks every analytic gradient in the crate against central finite
//! differences: the two losses, the two mutual composites, and the full
//! model backward pass.

use gml::gradcheck::{max_rel_err, numerical_grad};
use gml::losses::{
    jaccard_distance, mutual_loss_receiver, rkld_with, KldVariant, DEFAULT_JACCARD_EPS,
    DEFAULT_PROB_CLAMP,
};
use gml::model::{backward, forward};
use gml::{ArchSpec, Grid, ModelWeights, Rng};

const H: f64 = 1e-6;

type LossFn = Box<dyn Fn(&Grid) -> gml::Result<gml::losses::LossValue>>;

fn random_probs(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.05 + 0.9 * rng.uniform()).collect()
}

fn main() -> gml::Result<()> {
    let mut rng = Rng::derive(7, "gradient_check");
    let shape = [5, 5];
    let n = 25;

    let p1 = random_probs(&mut rng, n);
    let p2 = Grid::from_vec(&shape, random_probs(&mut rng, n))?;
    let mask = Grid::from_vec(&shape, (0..n).map(|i| f64::from(i % 3 == 0)).collect())?;

    let checks: Vec<(&str, LossFn)> = vec![
        (
            "jaccard_distance",
            Box::new({
                let mask = mask.clone();
                move |p| jaccard_distance(p, &mask, DEFAULT_JACCARD_EPS)
            }),
        ),
        (
            "rkld (eq1)",
            Box::new({
                let (p2, mask) = (p2.clone(), mask.clone());
                move |p| rkld_with(p, &p2, &mask, KldVariant::Eq1, DEFAULT_PROB_CLAMP)
            }),
        ),
        (
            "rkld (full)",
            Box::new({
                let (p2, mask) = (p2.clone(), mask.clone());
                move |p| rkld_with(p, &p2, &mask, KldVariant::Full, DEFAULT_PROB_CLAMP)
            }),
        ),
        (
            "mutual_loss_receiver",
            Box::new({
                let (p2, mask) = (p2.clone(), mask.clone());
                move |p| mutual_loss_receiver(p, &p2, &mask, DEFAULT_JACCARD_EPS)
            }),
        ),
    ];

    println!("loss gradients vs central differences (step {H:.0e}):");
    for (name, f) in &checks {
        let analytic = f(&Grid::from_vec(&shape, p1.clone())?)?;
        let numeric = numerical_grad(&p1, H, |x| {
            f(&Grid::from_vec(&shape, x.to_vec()).unwrap()).unwrap().value
        });
        let err = max_rel_err(analytic.grad_wrt_first_prediction.data(), &numeric);
        println!("  {name:22} max rel err = {err:.3e}");
        assert!(err < 1e-4);
    }

    // Full model: d(sum of outputs)/d(params) via backward with unit upstream.
    let arch = ArchSpec::default();
    let w = ModelWeights::init(arch, &mut rng)?;
    let image = Grid::from_vec(&[6, 6], (0..36).map(|_| rng.normal()).collect())?;
    let upstream = Grid::new(&[6, 6], 1.0)?;
    let analytic = backward(&w, &image, &upstream)?;
    let numeric = numerical_grad(&w.params, H, |p| {
        let m = ModelWeights {
            arch,
            params: p.to_vec(),
        };
        forward(&m, &image).unwrap().sum()
    });
    let err = max_rel_err(&analytic, &numeric);
    println!("model backward ({} params)   max rel err = {err:.3e}", w.params.len());
    assert!(err < 1e-4);

    println!("all gradients match");
    Ok(())
}
