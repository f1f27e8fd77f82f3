use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec};
use crate::vocab::VOCAB_SIZE;

/// Score function between an encoder state and the decoder state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// `⟨h_e, h_d⟩`
    Dot,
    /// `h_eᵀ W h_d`
    Bilinear,
    /// `vᵀ tanh(W [h_e, h_d])`
    Mlp,
    /// The MLP score with a convolution over the previous attention weights
    /// added inside the `tanh` (location-aware attention).
    ConvMlp,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dot => "dot",
            Self::Bilinear => "bilinear",
            Self::Mlp => "mlp",
            Self::ConvMlp => "conv-mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dot" => Self::Dot,
            "bilinear" => Self::Bilinear,
            "mlp" => Self::Mlp,
            "conv-mlp" => Self::ConvMlp,
            _ => return Err(Error::InvalidConfig(format!("unknown attention variant {s:?}"))),
        })
    }
}

/// Stack of valid (unpadded) 2-D convolutions over the time×frequency plane,
/// each followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvFrontend {
    pub layers: usize,
    pub filters: usize,
    /// (time, frequency) extent.
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl Default for ConvFrontend {
    fn default() -> Self {
        Self {
            layers: 2,
            filters: 32,
            kernel: (5, 8),
            stride: (2, 2),
        }
    }
}

impl ConvFrontend {
    /// Output extent of one layer along an axis.
    fn out_len(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
        (extent >= kernel).then(|| (extent - kernel) / stride + 1)
    }

    /// `(frames, width)` after all layers, or `None` when the input is too
    /// small for a valid convolution.
    pub fn output_size(&self, frames: usize, dim: usize) -> Option<(usize, usize)> {
        let (mut s, mut d) = (frames, dim);
        for _ in 0..self.layers {
            s = Self::out_len(s, self.kernel.0, self.stride.0)?;
            d = Self::out_len(d, self.kernel.1, self.stride.1)?;
        }
        Some((s, d * self.filters))
    }

    /// Smallest `(frames, dim)` input the stack accepts.
    pub fn min_input(&self) -> (usize, usize) {
        let (mut s, mut d) = (self.kernel.0, self.kernel.1);
        for _ in 1..self.layers {
            s = (s - 1) * self.stride.0 + self.kernel.0;
            d = (d - 1) * self.stride.1 + self.kernel.1;
        }
        (s, d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frontend {
    None,
    Conv2d(ConvFrontend),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension D of the input frames.
    pub input_dim: usize,
    pub encoder_layers: usize,
    pub encoder_cells: usize,
    pub decoder_layers: usize,
    pub decoder_cells: usize,
    pub embedding_size: usize,
    pub vocab_size: usize,
    pub attention: AttentionVariant,
    /// Hidden width of the MLP score.
    pub attention_dim: usize,
    pub attention_filters: usize,
    /// Odd kernel width of the location convolution; padding is `kernel / 2`.
    pub attention_kernel: usize,
    pub frontend: Frontend,
    pub dropout: f64,
}

impl ModelConfig {
    fn table1(input_dim: usize, enc: (usize, usize), dec: (usize, usize)) -> Self {
        Self {
            input_dim,
            encoder_layers: enc.0,
            encoder_cells: enc.1,
            decoder_layers: dec.0,
            decoder_cells: dec.1,
            embedding_size: 32,
            vocab_size: VOCAB_SIZE,
            attention: AttentionVariant::ConvMlp,
            attention_dim: dec.1,
            attention_filters: 128,
            attention_kernel: 15,
            frontend: Frontend::Conv2d(ConvFrontend::default()),
            dropout: 0.4,
        }
    }

    /// Encoder 5×384, decoder 3×384.
    pub fn teacher(input_dim: usize) -> Self {
        Self::table1(input_dim, (5, 384), (3, 384))
    }

    /// Encoder 4×256, decoder 1×256.
    pub fn student_mid(input_dim: usize) -> Self {
        Self::table1(input_dim, (4, 256), (1, 256))
    }

    /// Encoder 3×128, decoder 1×128.
    pub fn student_small(input_dim: usize) -> Self {
        Self::table1(input_dim, (3, 128), (1, 128))
    }

    pub fn preset(name: &str, input_dim: usize) -> Option<Self> {
        match name {
            "teacher" => Some(Self::teacher(input_dim)),
            "student-mid" => Some(Self::student_mid(input_dim)),
            "student-small" => Some(Self::student_small(input_dim)),
            _ => None,
        }
    }

    /// A small configuration without frontend, for tests and desk-scale runs.
    pub fn tiny(input_dim: usize, cells: usize, vocab_size: usize) -> Self {
        Self {
            input_dim,
            encoder_layers: 1,
            encoder_cells: cells,
            decoder_layers: 1,
            decoder_cells: cells,
            embedding_size: 4,
            vocab_size,
            attention: AttentionVariant::ConvMlp,
            attention_dim: cells,
            attention_filters: 3,
            attention_kernel: 3,
            frontend: Frontend::None,
            dropout: 0.0,
        }
    }

    /// Width M of the encoder states (bidirectional).
    pub fn encoder_width(&self) -> usize {
        2 * self.encoder_cells
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_cells", self.encoder_cells),
            ("decoder_layers", self.decoder_layers),
            ("decoder_cells", self.decoder_cells),
            ("embedding_size", self.embedding_size),
            ("attention_dim", self.attention_dim),
            ("attention_filters", self.attention_filters),
            ("attention_kernel", self.attention_kernel),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::InvalidConfig("vocab_size must be at least 3".into()));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("attention_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.attention == AttentionVariant::Dot && self.encoder_width() != self.decoder_cells {
            return Err(Error::UnequalWidths {
                encoder: self.encoder_width(),
                decoder: self.decoder_cells,
            });
        }
        if let Frontend::Conv2d(c) = self.frontend {
            let bad = c.layers == 0
                || c.filters == 0
                || c.kernel.0 == 0
                || c.kernel.1 == 0
                || c.stride.0 == 0
                || c.stride.1 == 0;
            if bad {
                return Err(Error::InvalidConfig("conv frontend sizes must be positive".into()));
            }
            if c.output_size(usize::MAX / 4, self.input_dim).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "input_dim {} too small for the conv frontend (needs {})",
                    self.input_dim,
                    c.min_input().1
                )));
            }
        }
        Ok(())
    }

    /// Width of the frames entering the encoder.
    pub fn frontend_width(&self) -> usize {
        match self.frontend {
            Frontend::None => self.input_dim,
            Frontend::Conv2d(c) => c
                .output_size(usize::MAX / 4, self.input_dim)
                .map_or(0, |(_, w)| w),
        }
    }

    /// Encoder output length for an input of `frames` frames.
    pub fn encoder_len(&self, frames: usize) -> Option<usize> {
        match self.frontend {
            Frontend::None => (frames > 0).then_some(frames),
            Frontend::Conv2d(c) => c.output_size(frames, self.input_dim).map(|(s, _)| s),
        }
    }

    /// Names, shapes and initializers of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(ParamSpec, Init)> {
        let mut out = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            out.push((ParamSpec { name, shape }, init));
        };
        let uniform = |fan_in: usize| Init::Uniform { fan_in };

        if let Frontend::Conv2d(c) = self.frontend {
            let mut c_in = 1;
            for l in 0..c.layers {
                let fan = c_in * c.kernel.0 * c.kernel.1;
                add(
                    format!("frontend.conv{l}.weight"),
                    vec![c.filters, c_in, c.kernel.0, c.kernel.1],
                    uniform(fan),
                );
                add(format!("frontend.conv{l}.bias"), vec![c.filters], Init::Zeros);
                c_in = c.filters;
            }
        }

        let h = self.encoder_cells;
        let mut width = self.frontend_width();
        for l in 0..self.encoder_layers {
            for dir in ["fwd", "bwd"] {
                let p = format!("encoder.l{l}.{dir}");
                add(format!("{p}.w_ih"), vec![width, 3 * h], uniform(width));
                add(format!("{p}.b_ih"), vec![1, 3 * h], Init::Zeros);
                add(format!("{p}.w_hh"), vec![h, 3 * h], uniform(h));
                add(format!("{p}.b_hh"), vec![1, 3 * h], Init::Zeros);
            }
            width = 2 * h;
        }

        let (m, n, a) = (self.encoder_width(), self.decoder_cells, self.attention_dim);
        match self.attention {
            AttentionVariant::Dot => {}
            AttentionVariant::Bilinear => add("attention.w".into(), vec![m, n], uniform(m)),
            AttentionVariant::Mlp | AttentionVariant::ConvMlp => {
                add("attention.w_enc".into(), vec![m, a], uniform(m + n));
                add("attention.w_dec".into(), vec![n, a], uniform(m + n));
                add("attention.v".into(), vec![a, 1], uniform(a));
                if self.attention == AttentionVariant::ConvMlp {
                    let (k, w) = (self.attention_filters, self.attention_kernel);
                    add("attention.conv.weight".into(), vec![k, 1, w], uniform(w));
                    add("attention.conv.bias".into(), vec![k], Init::Zeros);
                    add("attention.w_loc".into(), vec![k, a], uniform(k));
                    add("attention.b_loc".into(), vec![1, a], Init::Zeros);
                }
            }
        }

        let (v, e) = (self.vocab_size, self.embedding_size);
        add("decoder.embedding".into(), vec![v, e], uniform(1));
        let mut width = e + m;
        for l in 0..self.decoder_layers {
            let p = format!("decoder.l{l}");
            add(format!("{p}.w_ih"), vec![width, 3 * n], uniform(width));
            add(format!("{p}.b_ih"), vec![1, 3 * n], Init::Zeros);
            add(format!("{p}.w_hh"), vec![n, 3 * n], uniform(n));
            add(format!("{p}.b_hh"), vec![1, 3 * n], Init::Zeros);
            width = n;
        }
        add("output.weight".into(), vec![n + m, v], uniform(n + m));
        add("output.bias".into(), vec![1, v], Init::Zeros);
        out
    }

    /// Exact number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.parameter_layout().iter().map(|(s, _)| s.numel()).sum()
    }

    /// Canonical `key=value` form, keys sorted.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("input_dim", self.input_dim.to_string());
        put("encoder_layers", self.encoder_layers.to_string());
        put("encoder_cells", self.encoder_cells.to_string());
        put("decoder_layers", self.decoder_layers.to_string());
        put("decoder_cells", self.decoder_cells.to_string());
        put("embedding_size", self.embedding_size.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("attention", self.attention.name().into());
        put("attention_dim", self.attention_dim.to_string());
        put("attention_filters", self.attention_filters.to_string());
        put("attention_kernel", self.attention_kernel.to_string());
        put("dropout", format!("{}", self.dropout));
        match self.frontend {
            Frontend::None => put("frontend", "none".into()),
            Frontend::Conv2d(c) => {
                put("frontend", "conv2d".into());
                put("frontend_layers", c.layers.to_string());
                put("frontend_filters", c.filters.to_string());
                put("frontend_kernel", format!("{}x{}", c.kernel.0, c.kernel.1));
                put("frontend_stride", format!("{}x{}", c.stride.0, c.stride.1));
            }
        }
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies `key=value` overrides to `self`.
    pub fn apply_kv<'a>(&mut self, kv: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        fn num(k: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{k}: expected an integer, got {v:?}")))
        }
        fn pair(k: &str, v: &str) -> Result<(usize, usize)> {
            let (a, b) = v
                .split_once('x')
                .ok_or_else(|| Error::InvalidConfig(format!("{k}: expected AxB, got {v:?}")))?;
            Ok((num(k, a)?, num(k, b)?))
        }
        let mut conv = match self.frontend {
            Frontend::Conv2d(c) => c,
            Frontend::None => ConvFrontend::default(),
        };
        let mut use_conv = matches!(self.frontend, Frontend::Conv2d(_));
        for (k, v) in kv {
            let v = v.trim();
            match k.trim() {
                "input_dim" => self.input_dim = num(k, v)?,
                "encoder_layers" => self.encoder_layers = num(k, v)?,
                "encoder_cells" => self.encoder_cells = num(k, v)?,
                "decoder_layers" => self.decoder_layers = num(k, v)?,
                "decoder_cells" => self.decoder_cells = num(k, v)?,
                "embedding_size" => self.embedding_size = num(k, v)?,
                "vocab_size" => self.vocab_size = num(k, v)?,
                "attention" => self.attention = AttentionVariant::parse(v)?,
                "attention_dim" => self.attention_dim = num(k, v)?,
                "attention_filters" => self.attention_filters = num(k, v)?,
                "attention_kernel" => self.attention_kernel = num(k, v)?,
                "dropout" => {
                    self.dropout = v
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("dropout: bad value {v:?}")))?
                }
                "frontend" => {
                    use_conv = match v {
                        "none" => false,
                        "conv2d" => true,
                        _ => return Err(Error::InvalidConfig(format!("unknown frontend {v:?}"))),
                    }
                }
                "frontend_layers" => conv.layers = num(k, v)?,
                "frontend_filters" => conv.filters = num(k, v)?,
                "frontend_kernel" => conv.kernel = pair(k, v)?,
                "frontend_stride" => conv.stride = pair(k, v)?,
                other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
            }
        }
        self.frontend = if use_conv {
            Frontend::Conv2d(conv)
        } else {
            Frontend::None
        };
        Ok(())
    }

    /// Parses the canonical text form (blank lines and `#` comments allowed).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny(1, 1, VOCAB_SIZE);
        cfg.apply_kv(parse_kv_lines(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(&str, &str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {l:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frontend_output_formula() {
        let one = ConvFrontend {
            layers: 1,
            ..ConvFrontend::default()
        };
        assert_eq!(one.output_size(5, 8), Some((1, 32)));
        assert_eq!(one.output_size(100, 161), Some((48, 32 * 77)));
        assert_eq!(one.output_size(4, 8), None);
        assert_eq!(one.min_input(), (5, 8));
        let two = ConvFrontend::default();
        assert_eq!(two.min_input(), (13, 22));
        assert_eq!(two.output_size(13, 22), Some((1, 32)));
        assert_eq!(two.output_size(100, 161), Some((22, 32 * 35)));
    }

    #[test]
    fn text_round_trip() {
        for cfg in [
            ModelConfig::teacher(161),
            ModelConfig::student_small(161),
            ModelConfig::tiny(4, 8, 6),
        ] {
            let text = cfg.to_text();
            assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
            let keys: Vec<_> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(keys, sorted);
        }
    }

    #[test]
    fn dot_needs_matching_widths() {
        let mut cfg = ModelConfig::tiny(4, 8, 6);
        cfg.attention = AttentionVariant::Dot;
        assert!(matches!(cfg.validate(), Err(Error::UnequalWidths { .. })));
        cfg.decoder_cells = 16;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn embedding_table_contributes_vocab_times_width() {
        let cfg = ModelConfig::teacher(161);
        let emb = cfg
            .parameter_layout()
            .into_iter()
            .find(|(s, _)| s.name == "decoder.embedding")
            .unwrap();
        assert_eq!(emb.0.numel(), 31 * 32);
    }

    #[test]
    fn presets_match_table_one() {
        let t = ModelConfig::teacher(161);
        assert_eq!((t.encoder_layers, t.encoder_cells), (5, 384));
        assert_eq!((t.decoder_layers, t.decoder_cells), (3, 384));
        let s = ModelConfig::student_small(161);
        assert_eq!((s.encoder_layers, s.encoder_cells), (3, 128));
        assert_eq!((s.decoder_layers, s.decoder_cells), (1, 128));
        let m = ModelConfig::student_mid(161);
        assert_eq!((m.encoder_layers, m.encoder_cells), (4, 256));
        assert_eq!((m.decoder_layers, m.decoder_cells), (1, 256));
    }
}
