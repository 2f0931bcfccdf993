//! The dual-branch unpaired-quality network.
//!
//! Both branches share one structure and never share weights: a 3x3 stem,
//! then four stages of feature-extraction block, fusion, and 2x2 max
//! pooling. The fusion kind is fixed at construction. During pre-training a
//! classifier head consumes the final main-branch feature; during scoring
//! the same feature is bilinearly pooled with a semantic backbone's output
//! and regressed to a single scalar.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniqa_tensor::{Scalar, Tape, Tensor, Var};

use crate::backbone::{Backbone, BackboneVars};
use crate::error::NetError;
use crate::fusion;
use crate::params::{
    ConvParams, ConvVars, FebParams, FebVars, FusionKind, FusionParams, FusionVars, LinearParams,
    LinearVars,
};

pub const DEFAULT_STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Smallest input edge: four pooling stages need 16 pixels to keep a
/// nonempty map.
pub const MIN_INPUT_EDGE: usize = 16;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    pub class_count: usize,
    pub stage_widths: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(fusion: FusionKind, class_count: usize, seed: u64) -> Self {
        ModelConfig {
            fusion,
            class_count,
            stage_widths: DEFAULT_STAGE_WIDTHS.to_vec(),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnpairedIqaModel<S> {
    pub fusion_kind: FusionKind,
    pub class_count: usize,
    pub stage_widths: Vec<usize>,
    pub stem_d: ConvParams<S>,
    pub feb_d: Vec<FebParams<S>>,
    /// Present only when the fusion kind uses the reference branch.
    pub stem_er: Option<ConvParams<S>>,
    pub feb_er: Vec<FebParams<S>>,
    pub fusion: Vec<FusionParams<S>>,
    pub classifier: LinearParams<S>,
    pub score_head: Option<LinearParams<S>>,
    pub backbone: Option<Backbone<S>>,
}

/// Tape handles for every bound parameter, in the same order as
/// [`UnpairedIqaModel::named_params`].
pub struct ModelVars {
    pub stem_d: ConvVars,
    pub feb_d: Vec<FebVars>,
    pub stem_er: Option<ConvVars>,
    pub feb_er: Vec<FebVars>,
    pub fusion: Vec<FusionVars>,
    pub classifier: LinearVars,
    pub score_head: Option<LinearVars>,
    pub backbone: Option<BackboneVars>,
    pub ordered: Vec<Var>,
}

impl<S: Scalar> UnpairedIqaModel<S> {
    pub fn new(config: &ModelConfig) -> Self {
        assert_eq!(
            config.stage_widths.len(),
            4,
            "the architecture is fixed at four fusion stages"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = &config.stage_widths;
        let stem_d = ConvParams::kaiming(widths[0], 3, 3, &mut rng);
        let mut feb_d = Vec::with_capacity(4);
        let mut in_ch = widths[0];
        for &w in widths {
            feb_d.push(FebParams::kaiming(in_ch, w, &mut rng));
            in_ch = w;
        }
        let (stem_er, feb_er) = if config.fusion.uses_reference() {
            let stem = ConvParams::kaiming(widths[0], 3, 3, &mut rng);
            let mut febs = Vec::with_capacity(4);
            let mut in_ch = widths[0];
            for &w in widths {
                febs.push(FebParams::kaiming(in_ch, w, &mut rng));
                in_ch = w;
            }
            (Some(stem), febs)
        } else {
            (None, Vec::new())
        };
        let fusion = widths
            .iter()
            .map(|&w| FusionParams::new(config.fusion, w, &mut rng))
            .collect();
        // Heads start at zero: pre-training then begins from exactly uniform
        // class probabilities and scoring from 0.
        let classifier = LinearParams::zeros(config.class_count, *widths.last().unwrap());
        UnpairedIqaModel {
            fusion_kind: config.fusion,
            class_count: config.class_count,
            stage_widths: widths.clone(),
            stem_d,
            feb_d,
            stem_er,
            feb_er,
            fusion,
            classifier,
            score_head: None,
            backbone: None,
        }
    }

    /// Attach the semantic feature extractor and create the score head
    /// sized for the bilinearly pooled vector.
    pub fn attach_backbone(&mut self, backbone: Backbone<S>) {
        let pooled = self.stage_widths.last().unwrap() * backbone.feature_channels();
        self.score_head = Some(LinearParams::zeros(1, pooled));
        self.backbone = Some(backbone);
    }

    pub fn has_backbone(&self) -> bool {
        self.backbone.is_some()
    }

    // ------------------------------------------------------- param registry

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        collect_conv(&mut out, "stem_d", &self.stem_d);
        for (i, feb) in self.feb_d.iter().enumerate() {
            collect_feb(&mut out, &format!("feb_d.{i}"), feb);
        }
        if let Some(stem) = &self.stem_er {
            collect_conv(&mut out, "stem_er", stem);
        }
        for (i, feb) in self.feb_er.iter().enumerate() {
            collect_feb(&mut out, &format!("feb_er.{i}"), feb);
        }
        for (i, fusion) in self.fusion.iter().enumerate() {
            match fusion {
                FusionParams::None | FusionParams::Cosine => {}
                FusionParams::Bottleneck(p) => {
                    collect_conv(&mut out, &format!("fusion.{i}.fuse"), &p.fuse);
                }
                FusionParams::Mafe(p) => {
                    collect_conv(&mut out, &format!("fusion.{i}.pre_d"), &p.pre_d);
                    collect_conv(&mut out, &format!("fusion.{i}.pre_er"), &p.pre_er);
                    collect_linear(&mut out, &format!("fusion.{i}.squeeze"), &p.squeeze);
                }
            }
        }
        collect_linear(&mut out, "classifier", &self.classifier);
        if let Some(head) = &self.score_head {
            collect_linear(&mut out, "score_head", head);
        }
        if let Some(backbone) = &self.backbone {
            backbone.collect_named(&mut out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        collect_conv_mut(&mut out, "stem_d", &mut self.stem_d);
        for (i, feb) in self.feb_d.iter_mut().enumerate() {
            collect_feb_mut(&mut out, &format!("feb_d.{i}"), feb);
        }
        if let Some(stem) = &mut self.stem_er {
            collect_conv_mut(&mut out, "stem_er", stem);
        }
        for (i, feb) in self.feb_er.iter_mut().enumerate() {
            collect_feb_mut(&mut out, &format!("feb_er.{i}"), feb);
        }
        for (i, fusion) in self.fusion.iter_mut().enumerate() {
            match fusion {
                FusionParams::None | FusionParams::Cosine => {}
                FusionParams::Bottleneck(p) => {
                    collect_conv_mut(&mut out, &format!("fusion.{i}.fuse"), &mut p.fuse);
                }
                FusionParams::Mafe(p) => {
                    collect_conv_mut(&mut out, &format!("fusion.{i}.pre_d"), &mut p.pre_d);
                    collect_conv_mut(&mut out, &format!("fusion.{i}.pre_er"), &mut p.pre_er);
                    collect_linear_mut(&mut out, &format!("fusion.{i}.squeeze"), &mut p.squeeze);
                }
            }
        }
        collect_linear_mut(&mut out, "classifier", &mut self.classifier);
        if let Some(head) = &mut self.score_head {
            collect_linear_mut(&mut out, "score_head", head);
        }
        if let Some(backbone) = &mut self.backbone {
            backbone.collect_named_mut(&mut out);
        }
        out
    }

    /// Bind every parameter onto a tape. `ordered` lines up with
    /// [`Self::named_params`].
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> ModelVars {
        let mut ordered = Vec::new();
        let conv = |tape: &mut Tape<'a, S>, ordered: &mut Vec<Var>, p: &'a ConvParams<S>| {
            let vars = p.bind(tape);
            ordered.push(vars.weight);
            ordered.push(vars.bias);
            vars
        };
        let stem_d = conv(tape, &mut ordered, &self.stem_d);
        let mut feb_d = Vec::with_capacity(4);
        for feb in &self.feb_d {
            let c1 = conv(tape, &mut ordered, &feb.conv1);
            let c2 = conv(tape, &mut ordered, &feb.conv2);
            feb_d.push(FebVars { conv1: c1, conv2: c2 });
        }
        let stem_er = self.stem_er.as_ref().map(|p| conv(tape, &mut ordered, p));
        let mut feb_er = Vec::new();
        for feb in &self.feb_er {
            let c1 = conv(tape, &mut ordered, &feb.conv1);
            let c2 = conv(tape, &mut ordered, &feb.conv2);
            feb_er.push(FebVars { conv1: c1, conv2: c2 });
        }
        let mut fusion = Vec::with_capacity(4);
        for params in &self.fusion {
            let vars = match params {
                FusionParams::None => FusionVars::None,
                FusionParams::Cosine => FusionVars::Cosine,
                FusionParams::Bottleneck(p) => FusionVars::Bottleneck(
                    crate::params::BottleneckVars {
                        fuse: conv(tape, &mut ordered, &p.fuse),
                    },
                ),
                FusionParams::Mafe(p) => {
                    let pre_d = conv(tape, &mut ordered, &p.pre_d);
                    let pre_er = conv(tape, &mut ordered, &p.pre_er);
                    let squeeze = p.squeeze.bind(tape);
                    ordered.push(squeeze.weight);
                    ordered.push(squeeze.bias);
                    FusionVars::Mafe(crate::params::MafeVars { pre_d, pre_er, squeeze })
                }
            };
            fusion.push(vars);
        }
        let classifier = self.classifier.bind(tape);
        ordered.push(classifier.weight);
        ordered.push(classifier.bias);
        let score_head = self.score_head.as_ref().map(|p| {
            let vars = p.bind(tape);
            ordered.push(vars.weight);
            ordered.push(vars.bias);
            vars
        });
        let backbone = self.backbone.as_ref().map(|b| b.bind(tape, &mut ordered));
        ModelVars {
            stem_d,
            feb_d,
            stem_er,
            feb_er,
            fusion,
            classifier,
            score_head,
            backbone,
            ordered,
        }
    }

    // ------------------------------------------------------------- forward

    fn validate_image(&self, t: &Tensor<S>) -> Result<(), NetError> {
        if t.rank() != 3 || t.dims()[0] != 3 {
            return Err(NetError::NotAnImage {
                dims: t.dims().to_vec(),
            });
        }
        let (h, w) = (t.dims()[1], t.dims()[2]);
        if h < MIN_INPUT_EDGE || w < MIN_INPUT_EDGE {
            return Err(NetError::InputTooSmall { h, w });
        }
        Ok(())
    }

    fn reference_var<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        i_er: Option<Tensor<S>>,
    ) -> Result<Option<Var>, NetError> {
        if !self.fusion_kind.uses_reference() {
            return Ok(None);
        }
        let er = i_er.ok_or(NetError::MissingReference(match self.fusion_kind {
            FusionKind::Cosine => "cosine",
            FusionKind::Bottleneck => "bottleneck",
            FusionKind::Mafe => "mafe",
            FusionKind::None => unreachable!(),
        }))?;
        self.validate_image(&er)?;
        Ok(Some(tape.owned(er, false)))
    }

    /// Run stems and all four fused stages, returning the final main-branch
    /// feature map. With fusion kind `none` the reference path is never
    /// touched.
    fn trunk(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        x_d0: Var,
        x_er0: Option<Var>,
    ) -> Result<Var, NetError> {
        let mut x_d = self.stem_d.apply(tape, vars.stem_d, x_d0)?;
        let mut x_er = match (x_er0, &self.stem_er, vars.stem_er) {
            (Some(er), Some(stem), Some(stem_vars)) => Some(stem.apply(tape, stem_vars, er)?),
            _ => None,
        };
        for i in 0..4 {
            let f_dm = fusion::feb_forward(tape, &self.feb_d[i], vars.feb_d[i], x_d)?;
            match (&self.fusion[i], vars.fusion[i]) {
                (FusionParams::None, FusionVars::None) => {
                    x_d = tape.max_pool2(f_dm)?;
                }
                (params, fusion_vars) => {
                    let f_er =
                        fusion::feb_forward(tape, &self.feb_er[i], vars.feb_er[i], x_er.unwrap())?;
                    let fused = match (params, fusion_vars) {
                        (FusionParams::Cosine, FusionVars::Cosine) => {
                            fusion::cosine_fusion(tape, f_dm, f_er)?
                        }
                        (FusionParams::Bottleneck(p), FusionVars::Bottleneck(v)) => {
                            fusion::bottleneck_fusion(tape, p, v, f_dm, f_er)?
                        }
                        (FusionParams::Mafe(p), FusionVars::Mafe(v)) => {
                            fusion::mafe_fusion(tape, p, v, f_dm, f_er)?
                        }
                        _ => unreachable!("fusion params and vars always match"),
                    };
                    x_d = tape.max_pool2(fused)?;
                    x_er = Some(tape.max_pool2(f_er)?);
                }
            }
        }
        Ok(x_d)
    }

    /// Classification logits for pre-training.
    pub fn forward_pretrain_tape(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        i_d: Tensor<S>,
        i_er: Option<Tensor<S>>,
    ) -> Result<Var, NetError> {
        self.validate_image(&i_d)?;
        let x_er0 = self.reference_var(tape, i_er)?;
        let x_d0 = tape.owned(i_d, false);
        let trunk_out = self.trunk(tape, vars, x_d0, x_er0)?;
        let pooled = tape.global_avg_pool(trunk_out)?;
        Ok(tape.linear(pooled, vars.classifier.weight, vars.classifier.bias)?)
    }

    /// Quality score for fine-tuning and evaluation; higher means better.
    pub fn forward_score_tape(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        i_d: Tensor<S>,
        i_er: Option<Tensor<S>>,
    ) -> Result<Var, NetError> {
        let backbone = self.backbone.as_ref().ok_or(NetError::MissingBackbone)?;
        let backbone_vars = vars.backbone.as_ref().ok_or(NetError::MissingBackbone)?;
        let head = vars.score_head.ok_or(NetError::MissingBackbone)?;
        self.validate_image(&i_d)?;
        let x_er0 = self.reference_var(tape, i_er)?;
        let x_d0 = tape.owned(i_d, false);
        let trunk_out = self.trunk(tape, vars, x_d0, x_er0)?;
        let semantic = backbone.features(tape, backbone_vars, x_d0)?;
        let (th, tw) = {
            let d = tape.value(trunk_out).dims();
            (d[1], d[2])
        };
        let (sh, sw) = {
            let d = tape.value(semantic).dims();
            (d[1], d[2])
        };
        let semantic = if (sh, sw) == (th, tw) {
            semantic
        } else {
            tape.resize_nearest(semantic, th, tw)?
        };
        let pooled = tape.bilinear_pool(trunk_out, semantic)?;
        Ok(tape.linear(pooled, head.weight, head.bias)?)
    }

    // -------------------------------------------------------- conveniences

    /// Forward-only classification logits.
    pub fn predict_logits(
        &self,
        i_d: Tensor<S>,
        i_er: Option<Tensor<S>>,
    ) -> Result<Tensor<S>, NetError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward_pretrain_tape(&mut tape, &vars, i_d, i_er)?;
        Ok(tape.value(out).clone())
    }

    /// Forward-only quality score.
    pub fn predict_score(&self, i_d: Tensor<S>, i_er: Option<Tensor<S>>) -> Result<S, NetError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward_score_tape(&mut tape, &vars, i_d, i_er)?;
        Ok(tape.value(out).item())
    }

    /// Pre-fusion intermediate features of the given stage (0-based): the
    /// main-branch feature and, when a reference branch exists, the
    /// auxiliary feature of the same stage.
    pub fn stage_features(
        &self,
        stage: usize,
        i_d: Tensor<S>,
        i_er: Option<Tensor<S>>,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>), NetError> {
        assert!(stage < 4, "stages are numbered 0..4");
        self.validate_image(&i_d)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x_er0 = self.reference_var(&mut tape, i_er)?;
        let x_d0 = tape.owned(i_d, false);
        let mut x_d = self.stem_d.apply(&mut tape, vars.stem_d, x_d0)?;
        let mut x_er = match (x_er0, &self.stem_er, vars.stem_er) {
            (Some(er), Some(stem), Some(sv)) => Some(stem.apply(&mut tape, sv, er)?),
            _ => None,
        };
        for i in 0..=stage {
            let f_dm = fusion::feb_forward(&mut tape, &self.feb_d[i], vars.feb_d[i], x_d)?;
            let f_er = match x_er {
                Some(er) => {
                    Some(fusion::feb_forward(&mut tape, &self.feb_er[i], vars.feb_er[i], er)?)
                }
                None => None,
            };
            if i == stage {
                let main = tape.value(f_dm).clone();
                let aux = f_er.map(|v| tape.value(v).clone());
                return Ok((main, aux));
            }
            match (&self.fusion[i], vars.fusion[i], f_er) {
                (FusionParams::None, FusionVars::None, _) => {
                    x_d = tape.max_pool2(f_dm)?;
                }
                (FusionParams::Cosine, FusionVars::Cosine, Some(er)) => {
                    let fused = fusion::cosine_fusion(&mut tape, f_dm, er)?;
                    x_d = tape.max_pool2(fused)?;
                    x_er = Some(tape.max_pool2(er)?);
                }
                (FusionParams::Bottleneck(p), FusionVars::Bottleneck(v), Some(er)) => {
                    let fused = fusion::bottleneck_fusion(&mut tape, p, v, f_dm, er)?;
                    x_d = tape.max_pool2(fused)?;
                    x_er = Some(tape.max_pool2(er)?);
                }
                (FusionParams::Mafe(p), FusionVars::Mafe(v), Some(er)) => {
                    let fused = fusion::mafe_fusion(&mut tape, p, v, f_dm, er)?;
                    x_d = tape.max_pool2(fused)?;
                    x_er = Some(tape.max_pool2(er)?);
                }
                _ => unreachable!("fusion params and vars always match"),
            }
        }
        unreachable!()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn collect_conv<'m, S: Scalar>(
    out: &mut Vec<(String, &'m Tensor<S>)>,
    prefix: &str,
    p: &'m ConvParams<S>,
) {
    out.push((format!("{prefix}.weight"), &p.weight));
    out.push((format!("{prefix}.bias"), &p.bias));
}

fn collect_conv_mut<'m, S: Scalar>(
    out: &mut Vec<(String, &'m mut Tensor<S>)>,
    prefix: &str,
    p: &'m mut ConvParams<S>,
) {
    out.push((format!("{prefix}.weight"), &mut p.weight));
    out.push((format!("{prefix}.bias"), &mut p.bias));
}

fn collect_linear<'m, S: Scalar>(
    out: &mut Vec<(String, &'m Tensor<S>)>,
    prefix: &str,
    p: &'m LinearParams<S>,
) {
    out.push((format!("{prefix}.weight"), &p.weight));
    out.push((format!("{prefix}.bias"), &p.bias));
}

fn collect_linear_mut<'m, S: Scalar>(
    out: &mut Vec<(String, &'m mut Tensor<S>)>,
    prefix: &str,
    p: &'m mut LinearParams<S>,
) {
    out.push((format!("{prefix}.weight"), &mut p.weight));
    out.push((format!("{prefix}.bias"), &mut p.bias));
}

fn collect_feb<'m, S: Scalar>(
    out: &mut Vec<(String, &'m Tensor<S>)>,
    prefix: &str,
    p: &'m FebParams<S>,
) {
    collect_conv(out, &format!("{prefix}.conv1"), &p.conv1);
    collect_conv(out, &format!("{prefix}.conv2"), &p.conv2);
}

fn collect_feb_mut<'m, S: Scalar>(
    out: &mut Vec<(String, &'m mut Tensor<S>)>,
    prefix: &str,
    p: &'m mut FebParams<S>,
) {
    collect_conv_mut(out, &format!("{prefix}.conv1"), &mut p.conv1);
    collect_conv_mut(out, &format!("{prefix}.conv2"), &mut p.conv2);
}
