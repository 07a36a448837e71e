//! Octree coding over a digital link: symbol cost and the cliff at the
//! ideal rate-1/2 code's threshold, against uncoded BPSK.

use pcsc::dataio::{gen_synthetic, ShapeFamily, SyntheticShapeSpec};
use pcsc::octree::{baseline_transmit, biawgn_capacity, Coding, DigitalLinkConfig, Modulation, OctreeBitstream};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pcsc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = SyntheticShapeSpec::random(ShapeFamily::Torus, 1024, &mut rng);
    let cloud = gen_synthetic(&spec, &mut rng)?.cloud;
    let stream = OctreeBitstream::encode(&cloud, 8)?;
    println!("depth 8: {} bytes, leaf edge {:.4}", stream.to_bytes().len(), stream.leaf_edge());

    println!("{:>6} {:>8} {:>16} {:>16}", "snr", "C(bits)", "ideal r=1/2", "uncoded bpsk");
    for snr in [-15.0, -10.0, -5.0, -3.0, -2.0, 0.0, 5.0, 10.0] {
        let mut cells = Vec::new();
        for coding in [Coding::IdealRateHalf, Coding::None] {
            let link = DigitalLinkConfig { modulation: Modulation::Bpsk, coding, snr_db: snr };
            let out = baseline_transmit(&cloud, 8, &link, &mut rng)?;
            cells.push(match (&out.reconstruction, out.metrics) {
                (Ok(_), Some(m)) => format!("cd {:.2e}", m.cd),
                _ => "failed".to_string(),
            });
        }
        println!("{snr:>6.1} {:>8.3} {:>16} {:>16}", biawgn_capacity(snr), cells[0], cells[1]);
    }
    Ok(())
}
