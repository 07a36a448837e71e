//! Keypoint-aware farthest point sampling, kNN patches and random masking.

use pcsc::dataio::{gen_synthetic, ShapeFamily, SyntheticShapeSpec};
use pcsc::geometry::{fps, knn_group, kp_fps, random_mask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pcsc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = SyntheticShapeSpec::random(ShapeFamily::Box, 1024, &mut rng);
    let shape = gen_synthetic(&spec, &mut rng)?;
    let (cloud, kps) = (&shape.cloud, &shape.keypoints);

    let plain = fps(cloud, 16, &[])?;
    let seeded = kp_fps(cloud, kps, 16)?;
    let hits = |c: &[usize]| kps.indices.iter().filter(|k| c.contains(k)).count();
    println!("box corners among 16 centers: plain fps {}/8, keypoint fps {}/8", hits(&plain), hits(&seeded));

    let patches = knn_group(cloud, &seeded, 32)?;
    let masked = random_mask(&patches, 0.8, &mut rng)?;
    println!(
        "{} patches of {} points, {} visible after masking 80%",
        patches.patches.len(),
        patches.patches[0].len(),
        masked.visible_positions().len()
    );
    Ok(())
}
