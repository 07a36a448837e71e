//! Finite-difference check of a conditioned diffusion block and a codec
//! adaptation stage.

use pcsc::diffusion::{standard_normal, CpcBackbone, DiffusionConfig};
use pcsc::jscc::{JsccCodec, JsccConfig, StageCounts};
use pcsc::nn::grad_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pcsc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = DiffusionConfig { widths: vec![8, 3], ..DiffusionConfig::toy() };
    let mut bb = CpcBackbone::new(&cfg, 4, &mut rng)?;
    let (x, c) = (standard_normal(6, 3, &mut rng), standard_normal(2, 7, &mut rng));
    let net = bb.net.clone();
    let err = grad_check(&mut bb.params, &[x, c], |s, g, v| net.eps_predict(g, s, v[0], v[1], 3).unwrap(), 1e-6);
    println!("conditioned backbone: max relative error {err:.2e}");

    let jcfg = JsccConfig { d: 8, cond_width: 4, rates: vec![8, 4], stages: StageCounts::uniform(2), ..JsccConfig::toy() };
    let mut codec = JsccCodec::new(&jcfg, &mut rng)?;
    let f = standard_normal(1, 8, &mut rng);
    let net = codec.net.clone();
    let err = grad_check(&mut codec.params, &[f], |s, g, v| net.encode(g, s, v[0], 5.0, 4).unwrap(), 1e-6);
    println!("codec encoder:        max relative error {err:.2e}");
    Ok(())
}
