//! The collaborative detector: encoder, asymmetric attention fusion and decoder.
//!
//! Every forward function is generic over [`Ops`], so the same code runs
//! eagerly for inference and on a [`Tape`](made_tensor::Tape) for training
//! and attacks. Parameters are passed as a [`ParamSet`]; on a tape the
//! caller binds them as leaves first (see [`bind_params`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use made_tensor::{Checkpoint, Eager, Ops, ParamSet, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::rng::rng_for;
use crate::scene::{ObservationGrid, SceneConfig};

use super::proposals::ProposalSet;

pub const DETECTOR_KIND: &str = "made-detector";

/// Encoded local observation `F_i`, `H x W x C_f`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub agent: usize,
    pub tensor: Tensor,
}

/// Fusion output `Z_i`, `H x W x C_f`.
#[derive(Clone, Debug)]
pub struct FusedFeature {
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorArch {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub feature_channels: usize,
    pub hidden_channels: usize,
    /// `k`, background included.
    pub num_classes: usize,
    /// Fusion slots: the ego plus `num_agents - 1` collaborators.
    pub num_agents: usize,
    /// Largest center offset from the anchor cell center, in cells.
    pub max_offset: f64,
    /// Box side range in cells.
    pub min_size: f64,
    pub max_size: f64,
}

impl DetectorArch {
    pub fn for_scene(scene: &SceneConfig, feature_channels: usize, hidden_channels: usize) -> Self {
        Self {
            height: scene.grid_size,
            width: scene.grid_size,
            in_channels: scene.input_channels(),
            feature_channels,
            hidden_channels,
            num_classes: scene.num_classes,
            num_agents: scene.num_agents,
            max_offset: 2.0,
            min_size: 0.5,
            max_size: 2.0 * scene.max_object_size / (scene.world_extent / scene.grid_size as f64),
        }
    }

    pub fn anchors(&self) -> usize {
        self.height * self.width
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.feature_channels]
    }

    /// Parameter names and shapes.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (ci, cf, ch, k) = (self.in_channels, self.feature_channels, self.hidden_channels, self.num_classes);
        let mut m = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize| {
            m.push((format!("{name}.w"), vec![3, 3, cin, cout]));
            m.push((format!("{name}.b"), vec![cout]));
        };
        conv("enc.conv1", ci, cf);
        conv("enc.conv2", cf, cf);
        conv("dec.conv1", cf, ch);
        conv("dec.conv2", ch, ch);
        m.push(("dec.head.w".into(), vec![ch, k + 4]));
        m.push(("dec.head.b".into(), vec![k + 4]));
        m.push(("fuse.ego.w".into(), vec![cf, 1]));
        m.push(("fuse.ego.b".into(), vec![1]));
        m.push(("fuse.other.w".into(), vec![cf, 1]));
        m.push(("fuse.other.b".into(), vec![1]));
        m.sort();
        m
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.feature_channels == 0 || self.hidden_channels == 0 {
            return Err(CoreError::Invalid("detector dimensions must be positive".into()));
        }
        if self.num_classes < 2 || self.num_agents < 2 {
            return Err(CoreError::Invalid("detector needs k >= 2 and N >= 2".into()));
        }
        if !(self.max_offset > 0.0 && self.min_size > 0.0 && self.max_size > self.min_size) {
            return Err(CoreError::Invalid("box parameter ranges must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Binds every parameter as a gradient-requiring leaf of `ops`.
pub fn bind_params<O: Ops>(ops: &mut O, params: &ParamSet) -> ParamSet {
    params.iter().map(|(k, v)| (k.clone(), ops.leaf(v, true))).collect()
}

/// He-uniform initialization for every tensor in `manifest`; biases start at zero.
pub(crate) fn init_params(manifest: &[(String, Vec<usize>)], seed: u64, label: &str) -> ParamSet {
    let mut rng = rng_for(seed, label, 0);
    manifest
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            (name.clone(), Tensor::new(shape.clone(), data).expect("finite init"))
        })
        .collect()
}

pub(crate) fn check_manifest(params: &ParamSet, manifest: &[(String, Vec<usize>)]) -> Result<()> {
    if params.len() != manifest.len() {
        return Err(CoreError::Invalid(format!(
            "expected {} parameter tensors, found {}",
            manifest.len(),
            params.len()
        )));
    }
    for (name, shape) in manifest {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(CoreError::Invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(CoreError::Invalid(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}

pub(crate) fn param<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| CoreError::Invalid(format!("missing parameter {name}")))
}

pub(crate) fn conv_layer<O: Ops>(ops: &mut O, p: &ParamSet, name: &str, x: &Tensor) -> Result<Tensor> {
    let y = ops.conv2d(x, param(p, &format!("{name}.w"))?)?;
    Ok(ops.add_bias(&y, param(p, &format!("{name}.b"))?)?)
}

/// Differentiable decoder outputs.
#[derive(Clone, Debug)]
pub struct DecodedTensors {
    /// `[L, k]` raw class scores.
    pub logits: Tensor,
    /// `[L, k]` posteriors.
    pub probs: Tensor,
    /// `[L, 2]` center offsets from the anchor, in cells.
    pub offsets: Tensor,
    /// `[L, 2]` log box sizes.
    pub log_sizes: Tensor,
    /// `[L, 4]` boxes `(cx, cy, w, h)` in grid coordinates.
    pub boxes: Tensor,
}

impl DecodedTensors {
    pub fn to_proposals(&self, num_classes: usize) -> ProposalSet {
        let boxes = self
            .boxes
            .data()
            .chunks_exact(4)
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
            .collect();
        ProposalSet {
            num_classes,
            probs: self.probs.data().to_vec(),
            boxes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub arch: DetectorArch,
    pub params: ParamSet,
    anchor_centers: Tensor,
}

impl Detector {
    pub fn new(arch: DetectorArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_manifest(&params, &arch.manifest())?;
        let anchor_centers = anchor_centers(&arch);
        Ok(Self {
            arch,
            params,
            anchor_centers,
        })
    }

    pub fn init(arch: DetectorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = init_params(&arch.manifest(), seed, "detector-init");
        Self::new(arch, params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "arch": self.arch,
            "manifest": self.arch.manifest(),
        });
        Checkpoint::new(DETECTOR_KIND, meta, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != DETECTOR_KIND {
            return Err(CoreError::Invalid(format!("checkpoint kind {} is not a detector", ckpt.kind)));
        }
        let arch: DetectorArch = serde_json::from_value(ckpt.metadata["arch"].clone())
            .map_err(|e| CoreError::Invalid(format!("detector arch: {e}")))?;
        Self::new(arch, ckpt.tensors.clone())
    }

    fn check_observation(&self, obs: &Tensor) -> Result<()> {
        let want = [self.arch.height, self.arch.width, self.arch.in_channels];
        if obs.shape() != want {
            return Err(CoreError::Invalid(format!(
                "observation shape {:?} does not match model geometry {want:?}",
                obs.shape()
            )));
        }
        Ok(())
    }

    fn check_feature(&self, f: &Tensor) -> Result<()> {
        if f.shape() != self.arch.feature_shape() {
            return Err(CoreError::Invalid(format!(
                "feature map shape {:?} does not match {:?}",
                f.shape(),
                self.arch.feature_shape()
            )));
        }
        Ok(())
    }

    /// `f_E`: two 3x3 conv + relu layers.
    pub fn encode_with<O: Ops>(&self, ops: &mut O, p: &ParamSet, obs: &Tensor) -> Result<Tensor> {
        self.check_observation(obs)?;
        let h = conv_layer(ops, p, "enc.conv1", obs)?;
        let h = ops.relu(&h)?;
        let h = conv_layer(ops, p, "enc.conv2", &h)?;
        Ok(ops.relu(&h)?)
    }

    /// `f_G`: per-cell softmax attention over the ego and `N - 1` collaborator slots.
    ///
    /// Absent slots (`None`) enter as all-zero maps.
    pub fn fuse_with<O: Ops>(
        &self,
        ops: &mut O,
        p: &ParamSet,
        ego: &Tensor,
        others: &[Option<&Tensor>],
    ) -> Result<Tensor> {
        let slots = self.arch.num_agents - 1;
        if others.len() != slots {
            return Err(CoreError::Invalid(format!(
                "fusion expects {slots} collaborator slots, got {}",
                others.len()
            )));
        }
        self.check_feature(ego)?;
        for f in others.iter().flatten() {
            self.check_feature(f)?;
        }
        let [h, w, c] = self.arch.feature_shape();
        let zero = Tensor::zeros(&[h, w, c]);
        let maps: Vec<&Tensor> = std::iter::once(ego)
            .chain(others.iter().map(|o| o.unwrap_or(&zero)))
            .collect();
        let mut logits = Vec::with_capacity(maps.len());
        for (j, f) in maps.iter().enumerate() {
            let slot = if j == 0 { "fuse.ego" } else { "fuse.other" };
            let flat = ops.reshape(f, &[h * w, c])?;
            let s = ops.matmul(&flat, param(p, &format!("{slot}.w"))?)?;
            let s = ops.add_bias(&s, param(p, &format!("{slot}.b"))?)?;
            logits.push(ops.reshape(&s, &[h, w, 1])?);
        }
        let refs: Vec<&Tensor> = logits.iter().collect();
        let stacked = ops.concat_channels(&refs)?;
        let weights = ops.softmax_channel(&stacked)?;
        let mut acc: Option<Tensor> = None;
        for (j, f) in maps.iter().enumerate() {
            let wj = ops.slice_channels(&weights, j, 1)?;
            let term = ops.mul_cells(f, &wj)?;
            acc = Some(match acc {
                None => term,
                Some(a) => ops.add(&a, &term)?,
            });
        }
        Ok(acc.expect("at least the ego slot"))
    }

    /// `f_D`: two conv + relu layers, then a per-cell linear head with `k + 4` outputs.
    pub fn decode_with<O: Ops>(&self, ops: &mut O, p: &ParamSet, z: &Tensor) -> Result<DecodedTensors> {
        self.check_feature(z)?;
        let a = &self.arch;
        let (l, k) = (a.anchors(), a.num_classes);
        let h = conv_layer(ops, p, "dec.conv1", z)?;
        let h = ops.relu(&h)?;
        let h = conv_layer(ops, p, "dec.conv2", &h)?;
        let h = ops.relu(&h)?;
        let h = ops.reshape(&h, &[l, a.hidden_channels])?;
        let out = ops.matmul(&h, param(p, "dec.head.w")?)?;
        let out = ops.add_bias(&out, param(p, "dec.head.b")?)?;
        let logits = ops.slice_channels(&out, 0, k)?;
        let probs = ops.softmax_channel(&logits)?;

        let raw_offset = ops.slice_channels(&out, k, 2)?;
        let s = ops.sigmoid(&raw_offset)?;
        let s = ops.scale(&s, 2.0 * a.max_offset)?;
        let offsets = ops.add(&s, &Tensor::full(&[l, 2], -a.max_offset))?;
        let centers = ops.add(&offsets, &self.anchor_centers)?;

        let (lmin, lmax) = (a.min_size.ln(), a.max_size.ln());
        let raw_size = ops.slice_channels(&out, k + 2, 2)?;
        let s = ops.sigmoid(&raw_size)?;
        let s = ops.scale(&s, lmax - lmin)?;
        let log_sizes = ops.add(&s, &Tensor::full(&[l, 2], lmin))?;
        let sizes = ops.exp(&log_sizes)?;
        let boxes = ops.concat_channels(&[&centers, &sizes])?;
        Ok(DecodedTensors {
            logits,
            probs,
            offsets,
            log_sizes,
            boxes,
        })
    }

    pub fn encode(&self, obs: &ObservationGrid) -> Result<FeatureMap> {
        let tensor = self.encode_with(&mut Eager, &self.params, &obs.to_tensor())?;
        Ok(FeatureMap {
            agent: obs.agent_index,
            tensor,
        })
    }

    pub fn fuse(&self, ego: &FeatureMap, others: &[Option<&FeatureMap>]) -> Result<FusedFeature> {
        let others: Vec<Option<&Tensor>> = others.iter().map(|o| o.map(|f| &f.tensor)).collect();
        let tensor = self.fuse_with(&mut Eager, &self.params, &ego.tensor, &others)?;
        Ok(FusedFeature { tensor })
    }

    pub fn decode(&self, z: &FusedFeature) -> Result<ProposalSet> {
        let out = self.decode_with(&mut Eager, &self.params, &z.tensor)?;
        Ok(out.to_proposals(self.arch.num_classes))
    }

    /// `f_D(f_G(F_ego; others))` for an already encoded ego.
    pub fn detect_features(&self, ego: &FeatureMap, others: &[Option<&FeatureMap>]) -> Result<ProposalSet> {
        self.decode(&self.fuse(ego, others)?)
    }

    /// `f_D ∘ f_G ∘ f_E` on the ego observation and the received maps.
    pub fn detect(&self, ego_obs: &ObservationGrid, received: &[Option<&FeatureMap>]) -> Result<ProposalSet> {
        let ego = self.encode(ego_obs)?;
        self.detect_features(&ego, received)
    }

    /// Collaborator slots that leave only `present` non-absent, padded with `None`.
    pub fn slots<'a>(&self, present: &[&'a FeatureMap]) -> Result<Vec<Option<&'a FeatureMap>>> {
        let n = self.arch.num_agents - 1;
        if present.len() > n {
            return Err(CoreError::Invalid(format!("{} collaborators exceed {n} slots", present.len())));
        }
        let mut v: Vec<Option<&FeatureMap>> = present.iter().map(|f| Some(*f)).collect();
        v.resize(n, None);
        Ok(v)
    }
}

fn anchor_centers(arch: &DetectorArch) -> Tensor {
    let mut data = Vec::with_capacity(arch.anchors() * 2);
    for r in 0..arch.height {
        for c in 0..arch.width {
            data.push(c as f64 + 0.5);
            data.push(r as f64 + 0.5);
        }
    }
    Tensor::new(vec![arch.anchors(), 2], data).expect("finite anchors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use made_tensor::Tape;

    fn arch() -> DetectorArch {
        DetectorArch {
            height: 6,
            width: 6,
            in_channels: 3,
            feature_channels: 4,
            hidden_channels: 5,
            num_classes: 3,
            num_agents: 3,
            max_offset: 2.0,
            min_size: 0.5,
            max_size: 6.0,
        }
    }

    fn random_map(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = rng_for(seed, "map", 0);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn zero_biases(mut params: ParamSet) -> ParamSet {
        for (k, v) in params.iter_mut() {
            if k.ends_with(".b") {
                *v = Tensor::zeros(v.shape());
            }
        }
        params
    }

    #[test]
    fn zero_grid_encodes_to_zero_with_zero_biases() {
        let det = Detector::init(arch(), 1).unwrap();
        let det = Detector::new(det.arch.clone(), zero_biases(det.params)).unwrap();
        let f = det.encode_with(&mut Eager, &det.params, &Tensor::zeros(&[6, 6, 3])).unwrap();
        assert_eq!(f.shape(), &[6, 6, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_shape() {
        let det = Detector::init(arch(), 1).unwrap();
        assert!(det.encode_with(&mut Eager, &det.params, &Tensor::zeros(&[5, 6, 3])).is_err());
    }

    #[test]
    fn decode_contract() {
        let det = Detector::init(arch(), 2).unwrap();
        let z = FusedFeature {
            tensor: random_map(3, [6, 6, 4]),
        };
        let y = det.decode(&z).unwrap();
        assert_eq!(y.len(), 36);
        y.check().unwrap();
        for (i, p) in y.iter().enumerate() {
            let (r, c) = (i / 6, i % 6);
            assert!((p.bbox.cx - (c as f64 + 0.5)).abs() <= 2.0);
            assert!((p.bbox.cy - (r as f64 + 0.5)).abs() <= 2.0);
        }
    }

    #[test]
    fn fusion_permutation_invariant_and_asymmetric() {
        let det = Detector::init(arch(), 4).unwrap();
        let f: Vec<FeatureMap> = (0..3)
            .map(|i| FeatureMap {
                agent: i,
                tensor: random_map(10 + i as u64, [6, 6, 4]),
            })
            .collect();
        let a = det.fuse(&f[0], &[Some(&f[1]), Some(&f[2])]).unwrap();
        let b = det.fuse(&f[0], &[Some(&f[2]), Some(&f[1])]).unwrap();
        let diff = a.tensor.data().iter().zip(b.tensor.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
        let ab = det.fuse(&f[0], &[Some(&f[1]), None]).unwrap();
        let ba = det.fuse(&f[1], &[Some(&f[0]), None]).unwrap();
        assert!(!ab.tensor.bit_eq(&ba.tensor));
    }

    #[test]
    fn absent_equals_zero_map() {
        let det = Detector::init(arch(), 5).unwrap();
        let ego = FeatureMap {
            agent: 0,
            tensor: random_map(6, [6, 6, 4]),
        };
        let zero = FeatureMap {
            agent: 1,
            tensor: Tensor::zeros(&[6, 6, 4]),
        };
        let a = det.fuse(&ego, &[None, None]).unwrap();
        let b = det.fuse(&ego, &[Some(&zero), None]).unwrap();
        assert!(a.tensor.bit_eq(&b.tensor));
    }

    #[test]
    fn tape_and_eager_agree() {
        let det = Detector::init(arch(), 7).unwrap();
        let obs = random_map(8, [6, 6, 3]);
        let eager = det.encode_with(&mut Eager, &det.params, &obs).unwrap();
        let mut tape = Tape::new();
        let p = bind_params(&mut tape, &det.params);
        let taped = det.encode_with(&mut tape, &p, &obs).unwrap();
        assert!(eager.bit_eq(&taped));
    }

    #[test]
    fn checkpoint_round_trip() {
        let det = Detector::init(arch(), 9).unwrap();
        let bytes = det.to_checkpoint().to_bytes().unwrap();
        let back = Detector::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.arch, det.arch);
        for (k, v) in &det.params {
            assert!(v.bit_eq(&back.params[k]));
        }
    }
}
