//! Tiny semantic feature extractor.
//!
//! Stands in for a large pretrained classification network: a 3x3 stem and
//! three FEB/pool stages, pre-trained in-repo on a procedural shape
//! classification task, then plugged into the score path as a feature
//! extractor. The classifier head only matters during that pre-training.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniqa_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::NetError;
use crate::fusion::feb_forward;
use crate::params::{ConvParams, ConvVars, FebParams, FebVars, LinearParams, LinearVars};

pub const DEFAULT_BACKBONE_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug)]
pub struct Backbone<S> {
    pub widths: Vec<usize>,
    pub class_count: usize,
    pub stem: ConvParams<S>,
    pub febs: Vec<FebParams<S>>,
    pub classifier: LinearParams<S>,
}

pub struct BackboneVars {
    pub stem: ConvVars,
    pub febs: Vec<FebVars>,
    pub classifier: LinearVars,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(widths: &[usize], class_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvParams::kaiming(widths[0], 3, 3, &mut rng);
        let mut febs = Vec::with_capacity(widths.len());
        let mut in_ch = widths[0];
        for &w in widths {
            febs.push(FebParams::kaiming(in_ch, w, &mut rng));
            in_ch = w;
        }
        let classifier = LinearParams::zeros(class_count, *widths.last().unwrap());
        Backbone {
            widths: widths.to_vec(),
            class_count,
            stem,
            febs,
            classifier,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, ordered: &mut Vec<Var>) -> BackboneVars {
        let stem = self.stem.bind(tape);
        ordered.push(stem.weight);
        ordered.push(stem.bias);
        let mut febs = Vec::with_capacity(self.febs.len());
        for feb in &self.febs {
            let c1 = feb.conv1.bind(tape);
            ordered.push(c1.weight);
            ordered.push(c1.bias);
            let c2 = feb.conv2.bind(tape);
            ordered.push(c2.weight);
            ordered.push(c2.bias);
            febs.push(FebVars { conv1: c1, conv2: c2 });
        }
        let classifier = self.classifier.bind(tape);
        ordered.push(classifier.weight);
        ordered.push(classifier.bias);
        BackboneVars {
            stem,
            febs,
            classifier,
        }
    }

    /// Final convolutional feature map of an image var.
    pub fn features(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &BackboneVars,
        image: Var,
    ) -> Result<Var, NetError> {
        let mut x = self.stem.apply(tape, vars.stem, image)?;
        for (feb, feb_vars) in self.febs.iter().zip(vars.febs.iter()) {
            let f = feb_forward(tape, feb, *feb_vars, x)?;
            x = tape.max_pool2(f)?;
        }
        Ok(x)
    }

    /// Shape-classification logits, used only while pre-training the
    /// backbone itself.
    pub fn forward_classify(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &BackboneVars,
        image: Var,
    ) -> Result<Var, NetError> {
        let feat = self.features(tape, vars, image)?;
        let pooled = tape.global_avg_pool(feat)?;
        Ok(tape.linear(pooled, vars.classifier.weight, vars.classifier.bias)?)
    }

    pub fn collect_named<'m>(&'m self, out: &mut Vec<(String, &'m Tensor<S>)>) {
        out.push(("backbone.stem.weight".into(), &self.stem.weight));
        out.push(("backbone.stem.bias".into(), &self.stem.bias));
        for (i, feb) in self.febs.iter().enumerate() {
            out.push((format!("backbone.feb.{i}.conv1.weight"), &feb.conv1.weight));
            out.push((format!("backbone.feb.{i}.conv1.bias"), &feb.conv1.bias));
            out.push((format!("backbone.feb.{i}.conv2.weight"), &feb.conv2.weight));
            out.push((format!("backbone.feb.{i}.conv2.bias"), &feb.conv2.bias));
        }
        out.push(("backbone.classifier.weight".into(), &self.classifier.weight));
        out.push(("backbone.classifier.bias".into(), &self.classifier.bias));
    }

    pub fn collect_named_mut<'m>(&'m mut self, out: &mut Vec<(String, &'m mut Tensor<S>)>) {
        out.push(("backbone.stem.weight".into(), &mut self.stem.weight));
        out.push(("backbone.stem.bias".into(), &mut self.stem.bias));
        for (i, feb) in self.febs.iter_mut().enumerate() {
            out.push((format!("backbone.feb.{i}.conv1.weight"), &mut feb.conv1.weight));
            out.push((format!("backbone.feb.{i}.conv1.bias"), &mut feb.conv1.bias));
            out.push((format!("backbone.feb.{i}.conv2.weight"), &mut feb.conv2.weight));
            out.push((format!("backbone.feb.{i}.conv2.bias"), &mut feb.conv2.bias));
        }
        out.push(("backbone.classifier.weight".into(), &mut self.classifier.weight));
        out.push(("backbone.classifier.bias".into(), &mut self.classifier.bias));
    }

    /// Bind only the backbone onto a tape (for its own pre-training).
    pub fn bind_standalone<'a>(&'a self, tape: &mut Tape<'a, S>) -> (BackboneVars, Vec<Var>) {
        let mut ordered = Vec::new();
        let vars = self.bind(tape, &mut ordered);
        (vars, ordered)
    }
}
