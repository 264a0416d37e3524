//! Versioned JSON artifacts, content hashes, and run manifests.
//!
//! Two document kinds exist: `netlqr-model/1` (a problem instance) and
//! `netlqr-gains/1` (a synthesized schedule). Matrices are stored as arrays
//! of row arrays of finite doubles; serde_json prints doubles with the
//! shortest representation that round-trips, so parse(serialize(m)) is
//! bit-exact. Gains documents embed the content hash of the model they were
//! synthesized from plus a [`RunManifest`]; the manifest (and only it) may
//! differ between reruns, so hashes always cover the payload without it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    symmetrize, ChannelSpec, CostSchedule, Dims, ModelSpec, NoiseCovariance, NoiseFamily,
    NoiseSpec, PlantBlock,
};
use crate::synthesis::GainSchedule;

pub const FORMAT_MODEL: &str = "netlqr-model/1";
pub const FORMAT_GAINS: &str = "netlqr-gains/1";

/// Provenance block embedded in every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub model_hash: String,
    pub seeds: Vec<u64>,
    pub parameters: serde_json::Value,
    pub tool_version: String,
    /// Wall-clock duration of the producing command; varies between reruns
    /// and is excluded from all hashes.
    pub wall_ms: f64,
}

impl RunManifest {
    pub fn new(command: &str, model_hash: &str, seeds: Vec<u64>, parameters: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            model_hash: model_hash.to_string(),
            seeds,
            parameters,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_ms: 0.0,
        }
    }
}

type Rows = Vec<Vec<f64>>;

fn mat_to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_mat(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::Format(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{what}: ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vec_to_list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Serialize, Deserialize)]
struct RawDims {
    d_x: Vec<usize>,
    d_u: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawPlant {
    #[serde(rename = "A")]
    a: Rows,
    #[serde(rename = "B_local")]
    b_local: Rows,
    #[serde(rename = "B_remote")]
    b_remote: Rows,
}

#[derive(Serialize, Deserialize)]
struct RawCosts {
    #[serde(rename = "shared_R", skip_serializing_if = "Option::is_none")]
    shared_r: Option<Rows>,
    #[serde(rename = "per_step_R", skip_serializing_if = "Option::is_none")]
    per_step_r: Option<Vec<Rows>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSigmaW {
    Shared(Vec<Rows>),
    PerStep(Vec<Vec<Rows>>),
}

#[derive(Serialize, Deserialize)]
struct RawNoise {
    mu0: Vec<Vec<f64>>,
    sigma0: Vec<Rows>,
    sigma_w: RawSigmaW,
    family: NoiseFamily,
}

#[derive(Serialize, Deserialize)]
struct RawChannel {
    p: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    dims: RawDims,
    plants: Vec<RawPlant>,
    costs: RawCosts,
    noise: RawNoise,
    channel: RawChannel,
    horizon: usize,
}

fn model_to_file(model: &ModelSpec) -> ModelFile {
    ModelFile {
        format: FORMAT_MODEL.to_string(),
        dims: RawDims {
            d_x: model.dims.state_dims.clone(),
            d_u: model.dims.action_dims.clone(),
        },
        plants: model
            .plants
            .iter()
            .map(|p| RawPlant {
                a: mat_to_rows(&p.a),
                b_local: mat_to_rows(&p.b_local),
                b_remote: mat_to_rows(&p.b_remote),
            })
            .collect(),
        costs: match &model.costs {
            CostSchedule::Shared(r) => RawCosts {
                shared_r: Some(mat_to_rows(r)),
                per_step_r: None,
            },
            CostSchedule::PerStep(rs) => RawCosts {
                shared_r: None,
                per_step_r: Some(rs.iter().map(mat_to_rows).collect()),
            },
        },
        noise: RawNoise {
            mu0: model.noise.mu0.iter().map(vec_to_list).collect(),
            sigma0: model.noise.sigma0.iter().map(mat_to_rows).collect(),
            sigma_w: match &model.noise.sigma_w {
                NoiseCovariance::Shared(ms) => RawSigmaW::Shared(ms.iter().map(mat_to_rows).collect()),
                NoiseCovariance::PerStep(ms) => RawSigmaW::PerStep(
                    ms.iter().map(|per_t| per_t.iter().map(mat_to_rows).collect()).collect(),
                ),
            },
            family: model.noise.family,
        },
        channel: RawChannel {
            p: model.channel.failure_probs.clone(),
        },
        horizon: model.dims.horizon,
    }
}

fn file_to_model(file: ModelFile) -> Result<ModelSpec> {
    if file.format != FORMAT_MODEL {
        return Err(Error::Format(format!(
            "expected format {FORMAT_MODEL}, got {}",
            file.format
        )));
    }
    let dims = Dims::new(file.dims.d_x, file.dims.d_u, file.horizon);
    let plants = file
        .plants
        .iter()
        .enumerate()
        .map(|(n, p)| {
            Ok(PlantBlock {
                a: rows_to_mat(&p.a, &format!("plants[{n}].A"))?,
                b_local: rows_to_mat(&p.b_local, &format!("plants[{n}].B_local"))?,
                b_remote: rows_to_mat(&p.b_remote, &format!("plants[{n}].B_remote"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // text files may carry entry-level asymmetry; absorb it before checks
    let costs = match (file.costs.shared_r, file.costs.per_step_r) {
        (Some(rows), None) => CostSchedule::Shared(symmetrize(&rows_to_mat(&rows, "shared_R")?)),
        (None, Some(all)) => CostSchedule::PerStep(
            all.iter()
                .enumerate()
                .map(|(t, rows)| Ok(symmetrize(&rows_to_mat(rows, &format!("per_step_R[{t}]"))?)))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => {
            return Err(Error::Format(
                "costs must carry exactly one of shared_R / per_step_R".to_string(),
            ))
        }
    };
    let sigma_w = match file.noise.sigma_w {
        RawSigmaW::Shared(ms) => NoiseCovariance::Shared(
            ms.iter()
                .enumerate()
                .map(|(n, rows)| rows_to_mat(rows, &format!("sigma_w[{n}]")))
                .collect::<Result<Vec<_>>>()?,
        ),
        RawSigmaW::PerStep(ms) => NoiseCovariance::PerStep(
            ms.iter()
                .enumerate()
                .map(|(n, per_t)| {
                    per_t
                        .iter()
                        .enumerate()
                        .map(|(t, rows)| rows_to_mat(rows, &format!("sigma_w[{n}][{t}]")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(ModelSpec {
        dims,
        plants,
        costs,
        noise: NoiseSpec {
            mu0: file.noise.mu0.iter().map(|v| DVector::from_vec(v.clone())).collect(),
            sigma0: file
                .noise
                .sigma0
                .iter()
                .enumerate()
                .map(|(n, rows)| rows_to_mat(rows, &format!("sigma0[{n}]")))
                .collect::<Result<Vec<_>>>()?,
            sigma_w,
            family: file.noise.family,
        },
        channel: ChannelSpec {
            failure_probs: file.channel.p,
        },
    })
}

pub fn model_to_json(model: &ModelSpec) -> String {
    serde_json::to_string_pretty(&model_to_file(model)).expect("model serialization cannot fail")
}

pub fn model_from_json(text: &str) -> Result<ModelSpec> {
    file_to_model(serde_json::from_str(text)?)
}

pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    model_from_json(&std::fs::read_to_string(path)?)
}

/// Content hash (SHA-256, hex) of a model's canonical JSON form.
pub fn model_hash(model: &ModelSpec) -> String {
    let canonical =
        serde_json::to_string(&model_to_file(model)).expect("model serialization cannot fail");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct GainsFile {
    format: String,
    model_hash: String,
    dims: RawDims,
    horizon: usize,
    channel_p: Vec<f64>,
    p: Vec<Rows>,
    k: Vec<Rows>,
    p_drop: Vec<Vec<Rows>>,
    k_drop: Vec<Vec<Rows>>,
    noise_offset: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<RunManifest>,
}

pub fn gains_to_json(schedule: &GainSchedule, manifest: Option<&RunManifest>) -> String {
    let file = GainsFile {
        format: FORMAT_GAINS.to_string(),
        model_hash: schedule.model_hash.clone(),
        dims: RawDims {
            d_x: schedule.dims.state_dims.clone(),
            d_u: schedule.dims.action_dims.clone(),
        },
        horizon: schedule.dims.horizon,
        channel_p: schedule.failure_probs.clone(),
        p: schedule.p.iter().map(mat_to_rows).collect(),
        k: schedule.k.iter().map(mat_to_rows).collect(),
        p_drop: schedule
            .p_drop
            .iter()
            .map(|per_t| per_t.iter().map(mat_to_rows).collect())
            .collect(),
        k_drop: schedule
            .k_drop
            .iter()
            .map(|per_t| per_t.iter().map(mat_to_rows).collect())
            .collect(),
        noise_offset: schedule.noise_offset.clone(),
        manifest: manifest.cloned(),
    };
    serde_json::to_string_pretty(&file).expect("gains serialization cannot fail")
}

pub fn gains_from_json(text: &str) -> Result<GainSchedule> {
    let file: GainsFile = serde_json::from_str(text)?;
    if file.format != FORMAT_GAINS {
        return Err(Error::Format(format!(
            "expected format {FORMAT_GAINS}, got {}",
            file.format
        )));
    }
    let dims = Dims::new(file.dims.d_x, file.dims.d_u, file.horizon);
    let conv_all = |mats: &[Rows], what: &str| -> Result<Vec<DMatrix<f64>>> {
        mats.iter()
            .enumerate()
            .map(|(t, rows)| rows_to_mat(rows, &format!("{what}[{t}]")))
            .collect()
    };
    let conv_nested = |mats: &[Vec<Rows>], what: &str| -> Result<Vec<Vec<DMatrix<f64>>>> {
        mats.iter()
            .enumerate()
            .map(|(n, per_t)| conv_all(per_t, &format!("{what}[{n}]")))
            .collect()
    };
    let schedule = GainSchedule {
        p: conv_all(&file.p, "p")?,
        k: conv_all(&file.k, "k")?,
        p_drop: conv_nested(&file.p_drop, "p_drop")?,
        k_drop: conv_nested(&file.k_drop, "k_drop")?,
        noise_offset: file.noise_offset,
        failure_probs: file.channel_p,
        model_hash: file.model_hash,
        dims,
    };
    check_gains_shape(&schedule)?;
    Ok(schedule)
}

/// Structural validation of a parsed schedule: array lengths against the
/// horizon and subsystem count, matrix shapes against the dimensions.
fn check_gains_shape(schedule: &GainSchedule) -> Result<()> {
    let dims = &schedule.dims;
    let t = dims.horizon;
    let n_sub = dims.n_subsystems();
    let bad = |what: &str| Err(Error::Format(format!("gains: {what}")));
    if schedule.p.len() != t + 2 || schedule.k.len() != t + 1 || schedule.noise_offset.len() != t + 2
    {
        return bad("array lengths do not match the declared horizon");
    }
    if schedule.p_drop.len() != n_sub
        || schedule.k_drop.len() != n_sub
        || schedule.failure_probs.len() != n_sub
    {
        return bad("per-subsystem arrays do not match the subsystem count");
    }
    let (dx, du) = (dims.total_state_dim(), dims.total_action_dim());
    if schedule.p.iter().any(|m| m.shape() != (dx, dx))
        || schedule.k.iter().any(|m| m.shape() != (du, dx))
    {
        return bad("global matrix shapes do not match the dimensions");
    }
    for n in 0..n_sub {
        let (d, d_u) = (dims.state_dim(n), dims.local_action_dim(n));
        if schedule.p_drop[n].len() != t + 2
            || schedule.k_drop[n].len() != t + 1
            || schedule.p_drop[n].iter().any(|m| m.shape() != (d, d))
            || schedule.k_drop[n].iter().any(|m| m.shape() != (d_u, d))
        {
            return bad("per-subsystem matrix shapes do not match the dimensions");
        }
    }
    Ok(())
}

pub fn save_gains(schedule: &GainSchedule, manifest: Option<&RunManifest>, path: &Path) -> Result<()> {
    std::fs::write(path, gains_to_json(schedule, manifest))?;
    Ok(())
}

pub fn load_gains(path: &Path) -> Result<GainSchedule> {
    gains_from_json(&std::fs::read_to_string(path)?)
}

/// Parse a gains document and pull its manifest out separately (the CLI's
/// rerun test compares payloads with manifests stripped).
pub fn gains_manifest_from_json(text: &str) -> Result<Option<RunManifest>> {
    let file: GainsFile = serde_json::from_str(text)?;
    Ok(file.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, random_model_with_costs, CostSampling, Dims};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dims = Dims::new(vec![2, 1], vec![2, 1, 2], 3);
        let model = random_model(&dims, (0.0, 20.0), 5).unwrap();
        let parsed = model_from_json(&model_to_json(&model)).unwrap();
        assert_eq!(model, parsed);
        assert_eq!(model_hash(&model), model_hash(&parsed));
    }

    #[test]
    fn hash_is_sensitive_to_payload_changes() {
        let dims = Dims::new(vec![1], vec![1, 1], 2);
        let m1 = random_model(&dims, (0.0, 20.0), 1).unwrap();
        let mut m2 = m1.clone();
        m2.channel.failure_probs = vec![0.25];
        assert_ne!(model_hash(&m1), model_hash(&m2));
    }

    #[test]
    fn wrong_format_header_is_rejected() {
        let dims = Dims::new(vec![1], vec![1, 1], 1);
        let model = random_model(&dims, (0.0, 2.0), 3).unwrap();
        let tampered = model_to_json(&model).replace("netlqr-model/1", "netlqr-model/9");
        assert!(matches!(model_from_json(&tampered), Err(Error::Format(_))));
    }

    #[test]
    fn gains_round_trip_preserves_schedule() {
        let dims = Dims::new(vec![2], vec![1, 1], 4);
        let model =
            random_model_with_costs(&dims, (0.0, 5.0), 7, CostSampling::GramUniform).unwrap();
        let schedule = crate::synthesis::synthesize(&model).unwrap();
        let manifest = RunManifest::new("synthesize", &schedule.model_hash, vec![7], serde_json::json!({}));
        let text = gains_to_json(&schedule, Some(&manifest));
        let parsed = gains_from_json(&text).unwrap();
        assert_eq!(schedule, parsed);
        assert_eq!(gains_manifest_from_json(&text).unwrap().unwrap().command, "synthesize");
    }
}
