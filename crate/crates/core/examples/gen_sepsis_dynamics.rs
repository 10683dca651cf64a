//! Regenerates the dynamics files under `data/`.
//!
//! cargo run -p afa-core --example gen_sepsis_dynamics

use afa_core::sepsis::SepsisDynamics;

fn main() -> std::io::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::write(dir.join("sepsis_dynamics_v1.json"), SepsisDynamics::reference().to_json())?;
    std::fs::write(
        dir.join("sepsis_identity.json"),
        SepsisDynamics::identity("sepsis-identity-v1").to_json(),
    )?;
    Ok(())
}
