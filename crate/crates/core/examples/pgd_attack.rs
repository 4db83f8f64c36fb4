//! PGD on the analytic linear fixture: one step moves every pixel by
//! alpha in the direction of sign(w), and iterates stay in the budget.

use deacl::attack::{pgd, AttackConfig, LinearSurface};
use deacl::seed::SeedStreams;
use deacl::tensor::Tensor;

fn main() -> deacl::Result<()> {
    let w = vec![0.5, -2.0, 0.0, 1.0];
    let x = Tensor::new(vec![1, 4], vec![0.5; 4])?;
    let mut surface = LinearSurface { w: w.clone() };
    let mut rng = SeedStreams::new(0).stream("pgd");

    let one = AttackConfig {
        steps: 1,
        random_start: false,
        ..AttackConfig::training()
    };
    let adv = pgd(&mut surface, &x, &one, &mut rng)?;
    let delta: Vec<_> = adv.data().iter().zip(x.data()).map(|(a, b)| (a - b) * 255.0).collect();
    println!("one step, delta * 255 = {delta:?} (w = {w:?})");

    let many = AttackConfig {
        steps: 50,
        ..AttackConfig::evaluation()
    };
    let adv = pgd(&mut surface, &x, &many, &mut rng)?;
    println!(
        "50 steps with random start: max |delta| = {:.5} (epsilon {:.5})",
        adv.max_abs_diff(&x),
        many.epsilon
    );
    Ok(())
}
