//! Line-oriented model description language.
//!
//! ```text
//! # comment
//! name tiny
//! input 3 32 32
//! conv cin=3 cout=16 k=3 s=1 p=1
//! bn c=16
//! relu
//! residual_begin
//! fasternet c=16 cp=4 e=2
//! nam_channel c=16
//! residual_end
//! gap_head classes=2
//! ```
//!
//! `name` is optional; `input c h w` must precede the first layer. `fasternet`
//! accepts optional `k` (default 3) and `e` (default 2). Everything after `#`
//! on a line is ignored.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::blocks::{FasterNetSpec, PConvSpec, DEFAULT_EXPANSION};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;

/// Per-sample feature map dimensions `(c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        FeatureShape { c, h, w }
    }

    pub const fn elements(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvSpec),
    PConv(PConvSpec),
    PwConv { c_in: usize, c_out: usize },
    Bn { c: usize },
    Relu,
    FasterNet(FasterNetSpec),
    NamChannel { c: usize },
    NamSpatial { c: usize, h: usize, w: usize },
    ResidualBegin,
    ResidualEnd,
    GapHead { classes: usize },
}

impl LayerSpec {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::PConv(_) => "pconv",
            LayerSpec::PwConv { .. } => "pwconv",
            LayerSpec::Bn { .. } => "bn",
            LayerSpec::Relu => "relu",
            LayerSpec::FasterNet(_) => "fasternet",
            LayerSpec::NamChannel { .. } => "nam_channel",
            LayerSpec::NamSpatial { .. } => "nam_spatial",
            LayerSpec::ResidualBegin => "residual_begin",
            LayerSpec::ResidualEnd => "residual_end",
            LayerSpec::GapHead { .. } => "gap_head",
        }
    }

    /// Output shape for input `x`, checking channel continuity and geometry.
    pub fn output_shape(&self, x: FeatureShape) -> Result<FeatureShape> {
        let need_c = |c: usize| -> Result<()> {
            if c != x.c {
                return Err(Error::validation(format!(
                    "{} expects {c} input channels but receives {}",
                    self.keyword(),
                    x.c
                )));
            }
            Ok(())
        };
        match *self {
            LayerSpec::Conv(spec) => {
                spec.validate()?;
                need_c(spec.c_in)?;
                let (h, w) = spec.out_hw(x.h, x.w)?;
                Ok(FeatureShape::new(spec.c_out, h, w))
            }
            LayerSpec::PConv(spec) => {
                spec.validate()?;
                need_c(spec.c)?;
                Ok(x)
            }
            LayerSpec::PwConv { c_in, c_out } => {
                if c_in == 0 || c_out == 0 {
                    return Err(Error::validation("pwconv channel counts must be >= 1"));
                }
                need_c(c_in)?;
                Ok(FeatureShape::new(c_out, x.h, x.w))
            }
            LayerSpec::Bn { c } | LayerSpec::NamChannel { c } => {
                need_c(c)?;
                Ok(x)
            }
            LayerSpec::FasterNet(spec) => {
                spec.pconv.validate()?;
                need_c(spec.channels())?;
                Ok(x)
            }
            LayerSpec::NamSpatial { c, h, w } => {
                need_c(c)?;
                if (h, w) != (x.h, x.w) {
                    return Err(Error::validation(format!(
                        "nam_spatial is bound to {h}x{w} but receives {}x{}",
                        x.h, x.w
                    )));
                }
                Ok(x)
            }
            LayerSpec::Relu | LayerSpec::ResidualBegin | LayerSpec::ResidualEnd => Ok(x),
            LayerSpec::GapHead { classes } => {
                if classes == 0 {
                    return Err(Error::validation("gap_head classes must be >= 1"));
                }
                Ok(FeatureShape::new(classes, 1, 1))
            }
        }
    }

    fn attributes(&self) -> Vec<(&'static str, usize)> {
        match *self {
            LayerSpec::Conv(s) => vec![
                ("cin", s.c_in),
                ("cout", s.c_out),
                ("k", s.k),
                ("s", s.stride),
                ("p", s.padding),
            ],
            LayerSpec::PConv(s) => vec![("c", s.c), ("cp", s.c_p), ("k", s.k)],
            LayerSpec::PwConv { c_in, c_out } => vec![("cin", c_in), ("cout", c_out)],
            LayerSpec::Bn { c } | LayerSpec::NamChannel { c } => vec![("c", c)],
            LayerSpec::FasterNet(s) => vec![
                ("c", s.pconv.c),
                ("cp", s.pconv.c_p),
                ("k", s.pconv.k),
                ("e", s.expansion),
            ],
            LayerSpec::NamSpatial { c, h, w } => vec![("c", c), ("h", h), ("w", w)],
            LayerSpec::GapHead { classes } => vec![("classes", classes)],
            LayerSpec::Relu | LayerSpec::ResidualBegin | LayerSpec::ResidualEnd => vec![],
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())?;
        for (k, v) in self.attributes() {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// A validated, ordered layer pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub name: String,
    pub input_shape: FeatureShape,
    pub layers: Vec<LayerSpec>,
}

/// A validation failure located at a layer index.
#[derive(Debug)]
pub struct LayerError {
    pub index: usize,
    pub error: Error,
}

impl GraphSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: FeatureShape,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let g = GraphSpec {
            name: name.into(),
            input_shape,
            layers,
        };
        g.validate()?;
        Ok(g)
    }

    /// Output shape after every layer, starting from `input`.
    pub fn propagate(&self, input: FeatureShape) -> Result<Vec<FeatureShape>> {
        self.propagate_located(input).map_err(|e| {
            let kind = self
                .layers
                .get(e.index)
                .map(|l| l.keyword())
                .unwrap_or("end of graph");
            Error::Validation(format!(
                "layer {} ({kind}): {}",
                e.index + 1,
                strip(&e.error)
            ))
        })
    }

    fn propagate_located(&self, input: FeatureShape) -> Result<Vec<FeatureShape>, LayerError> {
        if input.c == 0 || input.h == 0 || input.w == 0 {
            return Err(LayerError {
                index: 0,
                error: Error::validation("input dimensions must be >= 1"),
            });
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut open: Vec<(usize, FeatureShape)> = Vec::new();
        let mut cur = input;
        for (index, layer) in self.layers.iter().enumerate() {
            let at = |error| LayerError { index, error };
            match layer {
                LayerSpec::ResidualBegin => open.push((index, cur)),
                LayerSpec::ResidualEnd => {
                    let (_, start) = open.pop().ok_or_else(|| {
                        at(Error::validation("residual_end without residual_begin"))
                    })?;
                    if start != cur {
                        return Err(at(Error::validation(format!(
                            "residual branch changes shape from {start} to {cur}"
                        ))));
                    }
                }
                _ => {}
            }
            cur = layer.output_shape(cur).map_err(at)?;
            shapes.push(cur);
        }
        if let Some((index, _)) = open.pop() {
            return Err(LayerError {
                index,
                error: Error::validation("residual_begin is never closed"),
            });
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.propagate(self.input_shape).map(|_| ())
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(self
            .propagate(self.input_shape)?
            .last()
            .copied()
            .unwrap_or(self.input_shape))
    }

    /// Canonical text form; parsing it yields an equal graph.
    pub fn to_config(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name {}", self.name);
        let s = self.input_shape;
        let _ = writeln!(out, "input {} {} {}", s.c, s.h, s.w);
        for layer in &self.layers {
            let _ = writeln!(out, "{layer}");
        }
        out
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Validation(m) | Error::Degenerate(m) => m.clone(),
        other => other.to_string(),
    }
}

struct Attrs {
    line: usize,
    kind: String,
    values: BTreeMap<String, usize>,
}

impl Attrs {
    fn parse(line: usize, kind: &str, tokens: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("expected key=value, found `{tok}`")))?;
            let v: usize = v.parse().map_err(|_| {
                Error::parse(
                    line,
                    format!("attribute `{k}` must be a non-negative integer, found `{v}`"),
                )
            })?;
            if values.insert(k.to_string(), v).is_some() {
                return Err(Error::parse(
                    line,
                    format!("duplicate attribute `{k}` on {kind}"),
                ));
            }
        }
        Ok(Attrs {
            line,
            kind: kind.to_string(),
            values,
        })
    }

    fn take(&mut self, key: &str) -> Result<usize> {
        self.values.remove(key).ok_or_else(|| {
            Error::parse(
                self.line,
                format!("{} is missing attribute `{key}`", self.kind),
            )
        })
    }

    fn take_or(&mut self, key: &str, default: usize) -> usize {
        self.values.remove(key).unwrap_or(default)
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.values.keys().next() {
            return Err(Error::parse(
                self.line,
                format!("unknown attribute `{k}` for {}", self.kind),
            ));
        }
        Ok(())
    }
}

fn parse_layer(line: usize, kind: &str, rest: &[&str]) -> Result<LayerSpec> {
    let mut a = Attrs::parse(line, kind, rest)?;
    let invalid = |e: Error| Error::parse(line, strip(&e));
    let layer = match kind {
        "conv" => LayerSpec::Conv(ConvSpec::new(
            a.take("cin")?,
            a.take("cout")?,
            a.take("k")?,
            a.take("s")?,
            a.take("p")?,
        )),
        "pconv" => LayerSpec::PConv(
            PConvSpec::new(a.take("c")?, a.take("cp")?, a.take("k")?).map_err(invalid)?,
        ),
        "pwconv" => LayerSpec::PwConv {
            c_in: a.take("cin")?,
            c_out: a.take("cout")?,
        },
        "bn" => LayerSpec::Bn { c: a.take("c")? },
        "relu" => LayerSpec::Relu,
        "fasternet" => {
            let (c, cp) = (a.take("c")?, a.take("cp")?);
            let k = a.take_or("k", 3);
            let e = a.take_or("e", DEFAULT_EXPANSION);
            LayerSpec::FasterNet(FasterNetSpec::new(c, cp, k, e).map_err(invalid)?)
        }
        "nam_channel" => LayerSpec::NamChannel { c: a.take("c")? },
        "nam_spatial" => LayerSpec::NamSpatial {
            c: a.take("c")?,
            h: a.take("h")?,
            w: a.take("w")?,
        },
        "residual_begin" => LayerSpec::ResidualBegin,
        "residual_end" => LayerSpec::ResidualEnd,
        "gap_head" => LayerSpec::GapHead {
            classes: a.take("classes")?,
        },
        other => return Err(Error::parse(line, format!("unknown layer kind `{other}`"))),
    };
    a.finish()?;
    Ok(layer)
}

fn parse_dims(line: usize, rest: &[&str]) -> Result<FeatureShape> {
    if rest.len() != 3 {
        return Err(Error::parse(
            line,
            "`input` takes exactly three integers: c h w",
        ));
    }
    let mut dims = [0usize; 3];
    for (d, tok) in dims.iter_mut().zip(rest) {
        *d = tok.parse().ok().filter(|&v| v > 0).ok_or_else(|| {
            Error::parse(
                line,
                format!("input dimension must be a positive integer, found `{tok}`"),
            )
        })?;
    }
    Ok(FeatureShape::new(dims[0], dims[1], dims[2]))
}

/// Parses and validates a model description.
pub fn parse_model_config(text: &str) -> Result<GraphSpec> {
    let mut name = None;
    let mut input = None;
    let mut layers = Vec::new();
    let mut line_of = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some((&head, rest)) = tokens.split_first() else {
            continue;
        };
        match head {
            "name" => {
                if name.is_some() || input.is_some() {
                    return Err(Error::parse(
                        line,
                        "`name` must appear once, before `input`",
                    ));
                }
                if rest.len() != 1 {
                    return Err(Error::parse(line, "`name` takes a single word"));
                }
                name = Some(rest[0].to_string());
            }
            "input" => {
                if input.is_some() {
                    return Err(Error::parse(line, "duplicate `input` header"));
                }
                input = Some(parse_dims(line, rest)?);
            }
            kind => {
                if input.is_none() {
                    return Err(Error::parse(
                        line,
                        "layers must follow an `input c h w` header",
                    ));
                }
                layers.push(parse_layer(line, kind, rest)?);
                line_of.push(line);
            }
        }
    }
    let input_shape = input.ok_or_else(|| Error::parse(1, "missing `input c h w` header"))?;
    let graph = GraphSpec {
        name: name.unwrap_or_else(|| "model".to_string()),
        input_shape,
        layers,
    };
    if let Err(e) = graph.propagate_located(input_shape) {
        let line = line_of.get(e.index).copied().unwrap_or(1);
        let kind = graph
            .layers
            .get(e.index)
            .map(|l| l.keyword())
            .unwrap_or("input");
        return Err(Error::parse(line, format!("{kind}: {}", strip(&e.error))));
    }
    Ok(graph)
}
