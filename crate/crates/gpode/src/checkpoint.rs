//! Versioned model checkpoints with corruption detection.
//!
//! A checkpoint is a JSON envelope: a format version, the hex SHA-256 digest
//! of the payload string, and the payload itself (the full parameter set,
//! serialized as a JSON string so the digested bytes survive the envelope's
//! own encoding unchanged). Loading verifies the version and the digest
//! before touching the payload, so truncation, bit rot, and hand edits all
//! surface as explicit errors rather than silently different models.

use crate::error::{Error, Result};
use crate::inference::ModelParameters;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    /// Hex SHA-256 of the exact payload string.
    digest: String,
    /// The parameter set as its own JSON document.
    payload: String,
}

fn hex_digest(payload: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in out {
        use std::fmt::Write as _;
        write!(hex, "{byte:02x}").expect("string write");
    }
    hex
}

/// Serialize the parameters to `path`. The written file reproduces every
/// parameter bit-exactly on load.
pub fn checkpoint_save(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let payload = serde_json::to_string(params)
        .map_err(|e| Error::Checkpoint(format!("parameter serialization: {e}")))?;
    let envelope = Envelope {
        format_version: CHECKPOINT_FORMAT_VERSION,
        digest: hex_digest(&payload),
        payload,
    };
    let text = serde_json::to_string(&envelope)
        .map_err(|e| Error::Checkpoint(format!("envelope serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load and verify a checkpoint written by [`checkpoint_save`].
pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<ModelParameters> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let envelope: Envelope = serde_json::from_str(&text).map_err(|e| {
        Error::Checkpoint(format!("`{}` is not a checkpoint envelope: {e}", path.display()))
    })?;
    if envelope.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "`{}` has format version {}, this build reads {}",
            path.display(),
            envelope.format_version,
            CHECKPOINT_FORMAT_VERSION
        )));
    }
    let actual = hex_digest(&envelope.payload);
    if actual != envelope.digest {
        return Err(Error::Checkpoint(format!(
            "`{}` failed its content digest check (stored {}, computed {actual})",
            path.display(),
            envelope.digest
        )));
    }
    let params: ModelParameters = serde_json::from_str(&envelope.payload)
        .map_err(|e| Error::Checkpoint(format!("`{}` payload: {e}", path.display())))?;
    // Re-run the structural checks so a handcrafted payload cannot smuggle
    // inconsistent shapes past the constructor.
    ModelParameters::new(params.model, params.prior_flow, params.variational)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, GridKind};
    use crate::dynamics::make_shooting_plan;
    use crate::flows::FlowStack;
    use crate::inference::{predict, train, TrainConfig, VariationalState};
    use crate::kernels::{sample_fourier_basis, SeKernelParams};
    use crate::sparse_gp::InducingModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_params(with_shooting: bool) -> ModelParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernel = SeKernelParams::new(&[0.8, 1.1], 0.5).unwrap();
        let z = ndarray::arr2(&[[0.0, 0.1], [0.5, -0.2], [-0.4, 0.3]]);
        let basis = sample_fourier_basis(&kernel, 12, 2, &mut rng).unwrap();
        let model = InducingModel::new(z, kernel, basis, &[0.05, 0.07]).unwrap();
        let mut vs = VariationalState::init(3, 2, 1, None, &mut rng).unwrap();
        if with_shooting {
            let grid = make_grid(GridKind::Regular, 7, 0.0, 1.0, 2, &mut rng).unwrap();
            vs.shooting = Some(make_shooting_plan(&grid, 2, 2).unwrap());
        }
        let prior_flow = FlowStack::init(2, 1, &mut rng).unwrap();
        ModelParameters::new(model, prior_flow, vs).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_shooting in [false, true] {
            let params = toy_params(with_shooting);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            checkpoint_save(&params, &path).unwrap();
            let loaded = checkpoint_load(&path).unwrap();
            assert_eq!(loaded.flatten(), params.flatten());
            // Non-parameter state survives too: basis and noise.
            assert_eq!(
                loaded.model.basis.n_features(),
                params.model.basis.n_features()
            );
            assert_eq!(loaded.model.noise_variances(), params.model.noise_variances());
            // Saving the loaded copy reproduces the file byte for byte.
            let path2 = dir.path().join("model2.ckpt");
            checkpoint_save(&loaded, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }

    #[test]
    fn trained_model_round_trip_predicts_identically() {
        let params = toy_params(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = make_grid(GridKind::Regular, 5, 0.0, 1.0, 2, &mut rng).unwrap();
        let values = ndarray::Array2::from_shape_fn((5, 2), |(i, j)| 0.1 * (i + j) as f64);
        let mask = ndarray::Array2::from_elem((5, 2), true);
        let data = crate::data::ObservationSet::new(grid.clone(), values, mask, Default::default()).unwrap();
        let mut config = TrainConfig::new(3, 9);
        config.n_mc = 1;
        let (trained, _) = train(&params, &data, None, &config).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trained.ckpt");
        checkpoint_save(&trained, &path).unwrap();
        let loaded = checkpoint_load(&path).unwrap();

        let mut r1 = ChaCha8Rng::seed_from_u64(33);
        let p1 = predict(&trained, &grid, 3, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(33);
        let p2 = predict(&loaded, &grid, 3, &mut r2).unwrap();
        assert_eq!(p1.trajectories.len(), p2.trajectories.len());
        for (a, b) in p1.trajectories.iter().zip(&p2.trajectories) {
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn flipped_payload_byte_fails_the_digest_check() {
        let params = toy_params(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Swap one digit inside the payload for a different digit, keeping
        // the JSON well formed so only the digest can catch it.
        let payload_at = bytes.windows(9).position(|w| w == b"\"payload\"").unwrap();
        let target = bytes[payload_at..]
            .iter()
            .position(|b| b.is_ascii_digit() && *b != b'0')
            .map(|i| payload_at + i)
            .unwrap();
        bytes[target] = if bytes[target] == b'1' { b'2' } else { b'1' };
        std::fs::write(&path, &bytes).unwrap();
        match checkpoint_load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("digest"), "message: {msg}"),
            other => panic!("expected digest failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncation_and_wrong_version_are_detected() {
        let params = toy_params(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&params, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::Checkpoint(_))));

        let versioned = path.with_extension("v99");
        let bumped = text.replace(
            "\"format_version\":1",
            "\"format_version\":99",
        );
        assert_ne!(bumped, text);
        std::fs::write(&versioned, bumped).unwrap();
        match checkpoint_load(&versioned) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("version") && msg.contains("99"), "message: {msg}")
            }
            other => panic!("expected version failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            checkpoint_load("/nonexistent/model.ckpt"),
            Err(Error::Io(_))
        ));
    }
}
