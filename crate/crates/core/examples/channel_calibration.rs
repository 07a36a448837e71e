//! Measured SNR of the AWGN and Rayleigh channels against the target.

use pcsc::channel::{rayleigh_gains, ChannelKind, ChannelRealization, SymbolVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> pcsc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sent = SymbolVector::new((0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect());
    println!("{:>9} {:>8} {:>10}", "channel", "target", "measured");
    for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
        for snr in [-10.0, 0.0, 10.0, 20.0] {
            let re = ChannelRealization::draw(kind, &sent, snr, &mut rng)?;
            let noise = re.noise.iter().map(|n| n * n).sum::<f64>() / re.noise.len() as f64;
            println!("{kind:>9} {snr:>8.1} {:>10.3}", 10.0 * (sent.power() / noise).log10());
        }
    }
    let h = rayleigh_gains(1_000_000, &mut rng);
    println!("Rayleigh E[h^2] = {:.4}", h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64);
    Ok(())
}
