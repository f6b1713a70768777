//! Noisy oracle `R = R̄(Q) + ξ(Q)` and ensemble aggregation.
//!
//! The simulator holds the hidden task target. Noise is isotropic Gaussian
//! with per-coordinate standard deviation `σ/√D` (D = payload size), so
//! `E‖ξ‖² = σ²` exactly. Every draw is a pure function of
//! `(seed, query bytes, draw index)`.

use serde::{Deserialize, Serialize};

use crate::codec::{decode, Query};
use crate::error::{arg_err, Error, Result};
use crate::matrix::Matrix;
use crate::rng::NoiseStream;
use crate::tensor::{multilinear_product, Tensor3};

/// Deterministic part `R̄` of the oracle response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMap {
    /// Returns the task target itself.
    IdentityCompletion,
    /// Returns `target − lift(query core)`: a corrective direction.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Root-mean-square noise norm: `E‖ξ‖² = noise_sigma²`.
    pub noise_sigma: f64,
    pub seed: u64,
    pub mean_map: MeanMap,
}

impl OracleConfig {
    pub fn new(noise_sigma: f64, seed: u64, mean_map: MeanMap) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return arg_err(format!(
                "noise_sigma must be finite and >= 0, got {noise_sigma}"
            ));
        }
        Ok(Self {
            noise_sigma,
            seed,
            mean_map,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResponse {
    pub payload: Tensor3,
    pub query_checksum_echo: u32,
    pub draws_used: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Median,
}

/// One oracle call.
#[derive(Clone, Copy, Debug)]
pub struct OracleRequest<'a> {
    pub query: &'a [u8],
    /// Factor matrices used to lift the query core into ambient coordinates.
    /// Not part of the wire format; only the residual mean map needs it.
    pub frame: Option<&'a [Matrix; 3]>,
    pub draw: u64,
}

impl<'a> OracleRequest<'a> {
    pub fn new(query: &'a [u8], draw: u64) -> Self {
        Self {
            query,
            frame: None,
            draw,
        }
    }

    pub fn with_frame(mut self, frame: &'a [Matrix; 3]) -> Self {
        self.frame = Some(frame);
        self
    }
}

/// Anything that can answer encoded queries. Implementations must give
/// distinct, independent noise for distinct draw indices.
pub trait Oracle {
    fn infer(&self, request: &OracleRequest<'_>) -> Result<OracleResponse>;
}

/// In-process oracle with a known target.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    pub config: OracleConfig,
    pub task_id: u32,
    target: Tensor3,
}

impl SimulatedOracle {
    pub fn new(config: OracleConfig, task_id: u32, target: Tensor3) -> Self {
        Self {
            config,
            task_id,
            target,
        }
    }

    pub fn target(&self) -> &Tensor3 {
        &self.target
    }

    fn decode_query(&self, bytes: &[u8]) -> Result<Query> {
        let q = decode(bytes).map_err(|e| match e {
            Error::Integrity { .. } => e,
            other => Error::Protocol(format!("undecodable query: {other}")),
        })?;
        if q.task_id != self.task_id {
            return Err(Error::Protocol(format!(
                "query for task {} sent to oracle for task {}",
                q.task_id, self.task_id
            )));
        }
        Ok(q)
    }

    /// `R̄(Q)`.
    pub fn mean_response(&self, q: &Query, frame: Option<&[Matrix; 3]>) -> Result<Tensor3> {
        match self.config.mean_map {
            MeanMap::IdentityCompletion => Ok(self.target.clone()),
            MeanMap::Residual => {
                let frame = frame.ok_or_else(|| {
                    Error::Protocol("residual mean map needs the query frame".into())
                })?;
                let lifted = multilinear_product(&q.core, [&frame[0], &frame[1], &frame[2]])
                    .map_err(|e| Error::Protocol(format!("frame does not match query: {e}")))?;
                self.target
                    .checked_sub(&lifted)
                    .map_err(|e| Error::Protocol(format!("frame does not match target: {e}")))
            }
        }
    }

    /// `ξ` for a given draw, already scaled.
    pub fn noise(&self, query_checksum: u32, draw: u64, dim: usize) -> Vec<f64> {
        let per_coord = self.config.noise_sigma / (dim as f64).sqrt();
        NoiseStream::new(self.config.seed, query_checksum)
            .standard_normals(draw, dim)
            .into_iter()
            .map(|z| per_coord * z)
            .collect()
    }
}

impl Oracle for SimulatedOracle {
    fn infer(&self, request: &OracleRequest<'_>) -> Result<OracleResponse> {
        let q = self.decode_query(request.query)?;
        let mean = self.mean_response(&q, request.frame)?;
        let payload = if self.config.noise_sigma == 0.0 || mean.is_empty() {
            mean
        } else {
            let xi = self.noise(q.checksum, request.draw, mean.len());
            let data = mean.data().iter().zip(xi).map(|(m, n)| m + n).collect();
            Tensor3::new(mean.shape(), data)?
        };
        Ok(OracleResponse {
            payload,
            query_checksum_echo: q.checksum,
            draws_used: 1,
        })
    }
}

/// Single oracle call (`O.infer(Q)`).
pub fn oracle_infer(oracle: &impl Oracle, request: &OracleRequest<'_>) -> Result<OracleResponse> {
    oracle.infer(request)
}

/// Variance-reduced call: `m` independent draws on the same query, indices
/// `request.draw .. request.draw + m`, combined by `agg`.
pub fn ensemble_infer(
    oracle: &impl Oracle,
    request: &OracleRequest<'_>,
    m: usize,
    agg: Aggregator,
) -> Result<OracleResponse> {
    if m == 0 {
        return arg_err("ensemble size must be at least 1");
    }
    let mut payloads = Vec::with_capacity(m);
    let mut echo = 0;
    for i in 0..m {
        let r = oracle.infer(&OracleRequest {
            draw: request.draw + i as u64,
            ..*request
        })?;
        echo = r.query_checksum_echo;
        payloads.push(r.payload);
    }
    Ok(OracleResponse {
        payload: aggregate(&payloads, agg)?,
        query_checksum_echo: echo,
        draws_used: m as u32,
    })
}

/// Elementwise mean or median.
pub fn aggregate(responses: &[Tensor3], method: Aggregator) -> Result<Tensor3> {
    let Some(first) = responses.first() else {
        return arg_err("cannot aggregate an empty response list");
    };
    if responses.iter().any(|r| r.shape() != first.shape()) {
        return arg_err("responses have mixed shapes");
    }
    if responses.len() == 1 {
        return Ok(first.clone());
    }
    let n = responses.len();
    let data: Vec<f64> = match method {
        // Incremental mean: bit-exact when all responses agree.
        Aggregator::Mean => {
            let mut acc = first.data().to_vec();
            for (i, r) in responses.iter().enumerate().skip(1) {
                let w = 1.0 / (i + 1) as f64;
                for (a, v) in acc.iter_mut().zip(r.data()) {
                    *a += (v - *a) * w;
                }
            }
            acc
        }
        Aggregator::Median => {
            let mut col = vec![0.0; n];
            (0..first.len())
                .map(|idx| {
                    for (c, r) in col.iter_mut().zip(responses) {
                        *c = r.data()[idx];
                    }
                    col.sort_by(f64::total_cmp);
                    if n % 2 == 1 {
                        col[n / 2]
                    } else {
                        0.5 * (col[n / 2 - 1] + col[n / 2])
                    }
                })
                .collect()
        }
    };
    Tensor3::new(first.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_core;
    use crate::rng::SeededRng;

    fn setup(sigma: f64, map: MeanMap) -> (SimulatedOracle, Vec<u8>) {
        let mut rng = SeededRng::new(5);
        let target = rng.gaussian_tensor([3, 3, 2]);
        let cfg = OracleConfig::new(sigma, 77, map).unwrap();
        let q = encode_core(&rng.gaussian_tensor([2, 1, 1]), 0.1, 4, 77).unwrap();
        (SimulatedOracle::new(cfg, 4, target), q)
    }

    #[test]
    fn noiseless_identity_oracle_returns_target() {
        let (o, q) = setup(0.0, MeanMap::IdentityCompletion);
        let a = o.infer(&OracleRequest::new(&q, 0)).unwrap();
        let b = o.infer(&OracleRequest::new(&q, 1)).unwrap();
        assert_eq!(&a.payload, o.target());
        assert_eq!(a, b);
        assert_eq!(a.draws_used, 1);
        assert_eq!(
            a.query_checksum_echo,
            crate::codec::frame_checksum(&q).unwrap()
        );
    }

    #[test]
    fn residual_map_needs_frame() {
        let (o, q) = setup(0.0, MeanMap::Residual);
        assert!(matches!(
            o.infer(&OracleRequest::new(&q, 0)),
            Err(Error::Protocol(_))
        ));
        let mut rng = SeededRng::new(6);
        let frame = [
            rng.orthonormal(3, 2),
            rng.orthonormal(3, 1),
            rng.orthonormal(2, 1),
        ];
        let r = o
            .infer(&OracleRequest::new(&q, 0).with_frame(&frame))
            .unwrap();
        let decoded = decode(&q).unwrap();
        let lifted = multilinear_product(&decoded.core, [&frame[0], &frame[1], &frame[2]]).unwrap();
        assert!((&r.payload + &lifted).max_abs_diff(o.target()) < 1e-14);
    }

    #[test]
    fn bad_queries() {
        let (o, q) = setup(0.1, MeanMap::IdentityCompletion);
        let mut bad = q.clone();
        bad[HEADER_OFFSET_PAYLOAD] ^= 1;
        assert!(matches!(
            o.infer(&OracleRequest::new(&bad, 0)),
            Err(Error::Integrity { .. })
        ));
        assert!(matches!(
            o.infer(&OracleRequest::new(&[1, 2], 0)),
            Err(Error::Protocol(_))
        ));
        let other_task = encode_core(&Tensor3::zeros([1, 1, 1]), 0.1, 99, 0).unwrap();
        assert!(matches!(
            o.infer(&OracleRequest::new(&other_task, 0)),
            Err(Error::Protocol(_))
        ));
    }

    const HEADER_OFFSET_PAYLOAD: usize = crate::codec::HEADER_LEN;

    #[test]
    fn determinism_by_draw_index() {
        let (o, q) = setup(0.5, MeanMap::IdentityCompletion);
        let a = o.infer(&OracleRequest::new(&q, 10)).unwrap();
        let b = o.infer(&OracleRequest::new(&q, 10)).unwrap();
        let c = o.infer(&OracleRequest::new(&q, 11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.payload, c.payload);
    }

    #[test]
    fn ensemble_of_one_matches_single_call() {
        let (o, q) = setup(0.5, MeanMap::IdentityCompletion);
        let req = OracleRequest::new(&q, 3);
        let single = o.infer(&req).unwrap();
        for agg in [Aggregator::Mean, Aggregator::Median] {
            let e = ensemble_infer(&o, &req, 1, agg).unwrap();
            assert_eq!(e.payload, single.payload);
        }
        let e8 = ensemble_infer(&o, &req, 8, Aggregator::Mean).unwrap();
        assert_eq!(e8.draws_used, 8);
        assert!(ensemble_infer(&o, &req, 0, Aggregator::Mean).is_err());
    }

    #[test]
    fn noiseless_ensemble_is_exact() {
        let (o, q) = setup(0.0, MeanMap::IdentityCompletion);
        for m in [1, 3, 8] {
            let e = ensemble_infer(&o, &OracleRequest::new(&q, 0), m, Aggregator::Mean).unwrap();
            assert!(e.payload.max_abs_diff(o.target()) < 1e-15);
        }
    }

    #[test]
    fn aggregate_examples() {
        let x = Tensor3::new([1, 1, 2], vec![1.0, -3.0]).unwrap();
        for m in [Aggregator::Mean, Aggregator::Median] {
            assert_eq!(aggregate(std::slice::from_ref(&x), m).unwrap(), x);
        }
        let zero = aggregate(&[x.clone(), x.scale(-1.0)], Aggregator::Mean).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let trio: Vec<Tensor3> = [1.0, 2.0, 100.0]
            .iter()
            .map(|&v| Tensor3::new([1, 1, 1], vec![v]).unwrap())
            .collect();
        assert_eq!(aggregate(&trio, Aggregator::Median).unwrap().data(), &[2.0]);
        assert!(aggregate(&[], Aggregator::Mean).is_err());
        assert!(aggregate(&[x, Tensor3::zeros([2, 1, 1])], Aggregator::Mean).is_err());
    }

    #[test]
    fn config_rejects_negative_sigma() {
        assert!(OracleConfig::new(-0.1, 0, MeanMap::IdentityCompletion).is_err());
        assert!(OracleConfig::new(f64::NAN, 0, MeanMap::IdentityCompletion).is_err());
    }
}
