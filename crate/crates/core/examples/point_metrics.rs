//! Chamfer, Hausdorff, EMD and paired MSE between a cloud and a jittered,
//! shuffled copy of it.

use pcsc::dataio::{gen_synthetic, ShapeFamily, SyntheticShapeSpec};
use pcsc::geometry::PointCloud;
use pcsc::metrics::MetricReport;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> pcsc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = SyntheticShapeSpec::random(ShapeFamily::Cylinder, 512, &mut rng);
    let reference = gen_synthetic(&spec, &mut rng)?.cloud;

    let jitter = Normal::new(0.0, 0.01).unwrap();
    for shuffle in [false, true] {
        let mut noisy = PointCloud::new(reference.points.iter().map(|p| p.map(|v| v + jitter.sample(&mut rng))).collect());
        if shuffle {
            noisy.points.shuffle(&mut rng);
        }
        let m = MetricReport::compute(&reference, &noisy)?;
        // CD, HD and EMD ignore point order; paired MSE does not.
        println!(
            "shuffled={shuffle:5}  mse={:.3e} cd={:.3e} hd={:.3e} emd={:.3e}",
            m.mse.unwrap(),
            m.cd,
            m.hd,
            m.emd.unwrap()
        );
    }
    Ok(())
}
