//! The student detector and its dynamic teacher under one joint objective.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dyndistill_autodiff::{Graph, ParamStore, Var};

use crate::adaptor::{scatter, AdaptHead, PermuteEncoder};
use crate::appearance::{rasterize, AppearanceEncoder};
use crate::backbone::Backbone;
use crate::config::{DistillConfig, ModelConfig};
use crate::data::Sample;
use crate::distill::{distill_loss, DistillOptions};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::fpn::Fpn;
use crate::head::{self, Head, LevelOutput, LossSums};
use crate::interaction::InteractionEncoder;
use crate::label_encoder::LabelEncoder;
use crate::nn::{Builder, FeatureMap};

/// Parameter-name prefixes of the two branches.
pub const STUDENT_PREFIXES: [&str; 4] = ["backbone.", "fpn.", "head.", "adapt."];
pub const TEACHER_PREFIX: &str = "teacher.";

/// Invocation counts of teacher-branch modules.
#[derive(Debug, Default)]
pub struct TeacherCalls {
    pub label: AtomicUsize,
    pub appearance: AtomicUsize,
    pub interaction: AtomicUsize,
    pub scatter: AtomicUsize,
    pub permute: AtomicUsize,
}

impl TeacherCalls {
    pub fn total(&self) -> usize {
        [
            &self.label,
            &self.appearance,
            &self.interaction,
            &self.scatter,
            &self.permute,
        ]
        .iter()
        .map(|c| c.load(Ordering::Relaxed))
        .sum()
    }

    pub fn reset(&self) {
        for c in [
            &self.label,
            &self.appearance,
            &self.interaction,
            &self.scatter,
            &self.permute,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub labels: LabelEncoder,
    pub appearance: AppearanceEncoder,
    pub interaction: InteractionEncoder,
    pub permute: Vec<PermuteEncoder>,
}

#[derive(Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub head: Head,
    pub adapt: Vec<AdaptHead>,
    pub teacher: Teacher,
    pub teacher_calls: Arc<TeacherCalls>,
}

/// Graph nodes of the three loss components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub det_student: Var,
    pub det_teacher: Option<Var>,
    pub distill: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub det_student: f64,
    pub det_teacher: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph<'_>) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0]);
        LossValues {
            det_student: v(Some(self.det_student)),
            det_teacher: v(self.det_teacher),
            distill: v(self.distill),
            total: v(Some(self.total)),
        }
    }
}

impl Detector {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, cfg.init_seed);
        let c = cfg.fpn_channels;
        let backbone = b.scope("backbone", |b| Backbone::new(b, &cfg.backbone));
        let dims: Vec<usize> = cfg.backbone.stages.iter().map(|s| s.dim).collect();
        let fpn = b.scope("fpn", |b| Fpn::new(b, &dims, c))?;
        let head = b.scope("head", |b| Head::new(b, &cfg.head, c, cfg.num_classes));
        let sizes = cfg.level_sizes();
        let adapt = (0..sizes.len())
            .map(|k| b.scope(&format!("adapt.level{k}"), |b| AdaptHead::new(b, c)))
            .collect();
        let teacher = b.scope("teacher", |b| -> Result<Teacher> {
            Ok(Teacher {
                labels: b.scope("label", |b| LabelEncoder::new(b, cfg.num_classes, c)),
                appearance: b.scope("appearance", |b| AppearanceEncoder::new(b, c)),
                interaction: b.scope("interaction", |b| {
                    InteractionEncoder::new(b, c, cfg.attention_heads)
                })?,
                permute: sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        b.scope(&format!("permute.level{k}"), |b| {
                            PermuteEncoder::new(b, s, s, c, cfg.segments, cfg.weighted_aggregation)
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            backbone,
            fpn,
            head,
            adapt,
            teacher,
            teacher_calls: Arc::default(),
        })
    }

    pub fn strides(&self) -> Vec<usize> {
        self.cfg.backbone.stage_strides()
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Parameters used at inference time.
    pub fn num_student_params(&self) -> usize {
        ["backbone.", "fpn.", "head."]
            .iter()
            .map(|p| self.params.numel_with_prefix(p))
            .sum()
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let size = self.cfg.image_size;
        if s.height != size || s.width != size {
            return Err(Error::Input(format!(
                "image {} is {}x{}, model expects {size}x{size}",
                s.image_id, s.height, s.width
            )));
        }
        Ok(())
    }

    /// Student pyramid for one image.
    pub fn pyramid(&self, g: &mut Graph<'_>, s: &Sample) -> Result<Vec<FeatureMap>> {
        self.check_sample(s)?;
        let x = g.constant(s.tensor());
        let stages = self.backbone.forward(g, FeatureMap::new(x, s.height, s.width))?;
        self.fpn.forward(g, &stages)
    }

    /// Instructive teacher maps, one per level.
    pub fn teacher_features(
        &self,
        g: &mut Graph<'_>,
        pyramid: &[FeatureMap],
        s: &Sample,
    ) -> Result<Vec<FeatureMap>> {
        let calls = &self.teacher_calls;
        calls.label.fetch_add(1, Ordering::Relaxed);
        let labels = self.teacher.labels.forward(g, &s.labels)?;
        let areas: Vec<f64> = s.labels.iter().map(|l| l.area()).collect();
        let mut out = Vec::with_capacity(pyramid.len());
        for (k, &f) in pyramid.iter().enumerate() {
            let masks = rasterize(&s.labels, f.h, f.w);
            calls.appearance.fetch_add(1, Ordering::Relaxed);
            let a = self.teacher.appearance.forward(g, f, &masks);
            calls.interaction.fetch_add(1, Ordering::Relaxed);
            let e = self.teacher.interaction.forward(g, a, labels)?;
            calls.scatter.fetch_add(1, Ordering::Relaxed);
            let dense = scatter(g, e, &masks, &areas);
            calls.permute.fetch_add(1, Ordering::Relaxed);
            out.push(self.teacher.permute[k].forward(g, dense)?);
        }
        Ok(out)
    }

    fn head_outputs(&self, g: &mut Graph<'_>, levels: &[FeatureMap]) -> Result<Vec<LevelOutput>> {
        self.head.forward(g, levels, &self.strides())
    }

    fn targets(&self, s: &Sample) -> Vec<head::LevelTargets> {
        let shapes: Vec<(usize, usize, usize)> = self
            .cfg
            .level_sizes()
            .iter()
            .zip(self.strides())
            .map(|(&n, st)| (n, n, st))
            .collect();
        head::assign(
            &self.cfg.head,
            &s.labels,
            self.cfg.image_size,
            self.cfg.num_classes,
            &shapes,
        )
    }

    /// Builds `L_det^S + L_det^T + lambda * L_distill` for a batch.
    pub fn total_loss(&self, g: &mut Graph<'_>, batch: &[&Sample], dc: &DistillConfig) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let use_teacher = dc.teacher;
        let use_distill = use_teacher && dc.lambda > 0.0;
        let opts = DistillOptions {
            tau: dc.tau,
            temperature_squared: dc.temperature_squared,
            domain: dc.softmax_domain,
        };
        if use_distill && !(dc.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", dc.tau)));
        }
        let mut student_sums: Vec<LossSums> = Vec::with_capacity(batch.len());
        let mut teacher_sums: Vec<LossSums> = Vec::new();
        let mut distill_terms = Vec::new();
        for s in batch {
            let pyramid = self.pyramid(g, s)?;
            let targets = self.targets(s);
            let out = self.head_outputs(g, &pyramid)?;
            student_sums.push(head::loss_sums(g, &self.cfg.head, &out, &targets));
            if !use_teacher {
                continue;
            }
            let source: Vec<FeatureMap> = if dc.detach_student_in_teacher {
                pyramid.iter().map(|f| f.with_var(g.detach(f.var))).collect()
            } else {
                pyramid.clone()
            };
            let tf = self.teacher_features(g, &source, s)?;
            let tout = self.head_outputs(g, &tf)?;
            teacher_sums.push(head::loss_sums(g, &self.cfg.head, &tout, &targets));
            if use_distill {
                let adapted: Vec<Var> = pyramid
                    .iter()
                    .zip(&self.adapt)
                    .map(|(&f, a)| a.forward(g, f).var)
                    .collect();
                let t: Vec<Var> = tf.iter().map(|f| f.var).collect();
                distill_terms.push(distill_loss(g, &t, &adapted, opts)?);
            }
        }
        let det_student = head::batch_loss(g, &student_sums);
        let det_teacher = (!teacher_sums.is_empty()).then(|| head::batch_loss(g, &teacher_sums));
        let distill = distill_terms
            .into_iter()
            .reduce(|a, b| g.add(a, b))
            .map(|d| g.scale(d, 1.0 / batch.len() as f64));
        let mut total = det_student;
        if let Some(t) = det_teacher {
            total = g.add(total, t);
        }
        if let Some(d) = distill {
            let wd = g.scale(d, dc.lambda);
            total = g.add(total, wd);
        }
        Ok(LossVars {
            det_student,
            det_teacher,
            distill,
            total,
        })
    }

    /// Student-only detection for one image.
    pub fn infer(&self, s: &Sample) -> Result<Vec<Detection>> {
        let mut g = Graph::with_params(&self.params);
        self.infer_in(&mut g, s)
    }

    /// As [`Detector::infer`], recording into a caller-owned graph.
    pub fn infer_in(&self, g: &mut Graph<'_>, s: &Sample) -> Result<Vec<Detection>> {
        let pyramid = self.pyramid(g, s)?;
        let out = self.head_outputs(g, &pyramid)?;
        Ok(head::decode(g, &self.cfg.head, &out, self.cfg.image_size, s.image_id))
    }
}
