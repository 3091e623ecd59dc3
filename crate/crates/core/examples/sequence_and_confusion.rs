//! Standardizes pose sequences to a fixed length and tallies a confusion
//! matrix for a uniformly random classifier.

use mvpose::evaluation::{confusion_and_accuracy, ActionLabel, PoseSequence, STANDARD_LENGTH};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mvpose::Result<()> {
    for len in [37, 100, 180] {
        let frames = (0..len).map(|t| vec![Vector3::new(t as f64, 0.0, 0.0)]).collect();
        let seq = PoseSequence::new(frames, Some(ActionLabel::Screw))?.standardized(STANDARD_LENGTH)?;
        println!(
            "length {len:>3} → {} frames, last frame x = {}",
            seq.frames.len(),
            seq.frames.last().unwrap()[0].x
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<_> = (0..6000)
        .map(|_| {
            let truth = ActionLabel::ALL[rng.random_range(0..6)];
            let guess = ActionLabel::ALL[rng.random_range(0..6)];
            (truth, guess)
        })
        .collect();
    let (matrix, accuracy) = confusion_and_accuracy(&pairs)?;
    print!("{}", matrix.to_csv());
    println!("accuracy {:.2}% (chance {:.2}%)", 100.0 * accuracy, 100.0 / 6.0);
    Ok(())
}
