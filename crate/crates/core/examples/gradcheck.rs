//! Central-difference check of tape gradients for a few ops and the losses.

use deacl::distill::{deacl_loss, kl_distance_loss};
use deacl::pretrain::info_nce_stacked;
use deacl::seed::SeedStreams;
use deacl::tensor::{grad_check, Tape, Tensor, Var};
use rand::Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> deacl::Result<Var>>);

fn main() -> deacl::Result<()> {
    let mut rng = SeedStreams::new(7).stream("gradcheck");
    let other = random(&[4, 6], &mut rng);
    let o2 = other.clone();
    let o3 = other.clone();
    let cases: Vec<Case> = vec![
        ("log_softmax", vec![4, 6], Box::new(|t, x| {
            let y = t.log_softmax(x)?;
            t.sum(y)
        })),
        ("normalize", vec![4, 6], Box::new(|t, x| {
            let y = t.normalize(x)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("info_nce", vec![8, 6], Box::new(|t, x| info_nce_stacked(t, x, 0.5))),
        ("deacl_loss", vec![4, 6], Box::new(move |t, x| {
            let a = t.constant(other.clone());
            let z = t.constant(o2.clone());
            deacl_loss(t, x, a, z, 2.0)
        })),
        ("kl_distance", vec![4, 6], Box::new(move |t, x| {
            let r = t.constant(o3.clone());
            kl_distance_loss(t, x, r)
        })),
    ];
    for (name, shape, f) in &cases {
        let x = random(shape, &mut rng);
        let r = grad_check(f, &x, 1e-2)?;
        println!("{name:<12} max relative error {:.2e}", r.max_rel_error);
    }
    Ok(())
}
