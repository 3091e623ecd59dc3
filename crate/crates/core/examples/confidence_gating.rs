//! Boundary modulation, threshold-rescale and temporal median filtering of a
//! single 2D track.

use mvpose::confidence::{
    median_filter_track, modulate_confidence, threshold_rescale, Detection2D, DEFAULT_MARGIN_PX, DEFAULT_TAU,
};

fn main() {
    let (w, h) = (160.0, 160.0);
    println!("x      w_c   w'     w");
    for x in [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 80.0] {
        let det = Detection2D::new(x, 80.0, 0.9);
        let w_prime = modulate_confidence(&det, w, h, DEFAULT_MARGIN_PX);
        let weight = threshold_rescale(w_prime, DEFAULT_TAU);
        println!("{x:<6} {:.2}  {w_prime:.3}  {weight:.3}", det.confidence);
    }

    // one spurious jump in an otherwise smooth track
    let track: Vec<Option<Detection2D>> = (0..9)
        .map(|t| {
            let x = if t == 4 { 140.0 } else { 60.0 + t as f64 };
            Some(Detection2D::new(x, 70.0, 0.95))
        })
        .collect();
    let filtered = median_filter_track(&track, 5);
    let xs = |v: &[Option<Detection2D>]| v.iter().map(|d| format!("{:.0}", d.unwrap().x)).collect::<Vec<_>>().join(" ");
    println!("raw      {}", xs(&track));
    println!("filtered {}", xs(&filtered));
}
