//! U-shaped detector: five encoder stages (block then channel attention),
//! four decoder stages (upsample, 1×1 channel reduction, skip fusion) and
//! 1×1 heads, optionally one per decoder stage for deep supervision.

use irdet_tensor::{bilinear_resize, bilinear_upsample2, max_pool2, ConvGeometry, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Conv2d, ConvUnit, ParamBuilder, ParamStore, Session};
use crate::registry::{ChannelAttention, EncoderBlock, SkipFusion, StageSpec, Strategies};
use crate::serank::compute_k;

/// Module on/off switches, translated to strategy names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub ddc: bool,
    pub cdc: bool,
    pub dilated: bool,
    pub serank: bool,
    pub pe: bool,
    pub lsff: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        ddc: true,
        cdc: true,
        dilated: true,
        serank: true,
        pe: true,
        lsff: true,
    };
    pub const BASELINE: Self = Self {
        ddc: false,
        cdc: false,
        dilated: false,
        serank: false,
        pe: false,
        lsff: false,
    };

    pub fn encoder(self) -> &'static str {
        match (self.ddc, self.cdc, self.dilated) {
            (true, true, true) => "ddc",
            (true, true, false) => "ddc-cdc",
            (true, false, true) => "ddc-dilated",
            _ => "conv",
        }
    }

    pub fn attention(self) -> &'static str {
        match (self.serank, self.pe) {
            (false, _) => "identity",
            (true, false) => "serank-nope",
            (true, true) => "serank",
        }
    }

    pub fn fusion(self) -> &'static str {
        if self.lsff {
            "lsff"
        } else {
            "concat"
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub channels: Vec<usize>,
    pub offset_o: i32,
    pub input_channels: usize,
    pub dilations: [usize; 3],
    pub lsff_kernel: usize,
    pub deep_supervision: bool,
    pub encoder: String,
    pub attention: String,
    pub fusion: String,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512, 1024],
            offset_o: 3,
            input_channels: 1,
            dilations: [2, 4, 2],
            lsff_kernel: 7,
            deep_supervision: true,
            encoder: "ddc".into(),
            attention: "serank".into(),
            fusion: "lsff".into(),
        }
    }
}

impl NetConfig {
    pub fn with_channels(channels: &[usize]) -> Self {
        Self {
            channels: channels.to_vec(),
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.encoder = a.encoder().into();
        self.attention = a.attention().into();
        self.fusion = a.fusion().into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidNetwork(msg));
        if self.channels.len() != 5 {
            return bad(format!("expected 5 channel widths, got {}", self.channels.len()));
        }
        if !self.channels.iter().all(|c| c.is_power_of_two()) {
            return bad(format!("channel widths {:?} are not all powers of two", self.channels));
        }
        if !self.channels.windows(2).all(|p| p[0] < p[1]) {
            return bad(format!("channel widths {:?} are not strictly increasing", self.channels));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if self.lsff_kernel.is_multiple_of(2) {
            return bad(format!("lsff_kernel {} is not odd", self.lsff_kernel));
        }
        Ok(())
    }

    /// Unclamped K of each stage.
    pub fn stage_k(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| compute_k(c, self.offset_o, i + 1))
            .collect()
    }

    /// `key=value` lines; inverse of [`NetConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        format!(
            "channels={}\noffset_o={}\ninput_channels={}\ndilations={}\nlsff_kernel={}\ndeep_supervision={}\nencoder={}\nattention={}\nfusion={}\n",
            list(&self.channels),
            self.offset_o,
            self.input_channels,
            list(&self.dilations),
            self.lsff_kernel,
            self.deep_supervision,
            self.encoder,
            self.attention,
            self.fusion
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let bad = |line: &str| Error::InvalidNetwork(format!("bad config line `{line}`"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            let list = || -> Result<Vec<usize>> {
                value.split(',').map(|v| v.trim().parse().map_err(|_| bad(line))).collect()
            };
            match key.trim() {
                "channels" => cfg.channels = list()?,
                "offset_o" => cfg.offset_o = value.parse().map_err(|_| bad(line))?,
                "input_channels" => cfg.input_channels = value.parse().map_err(|_| bad(line))?,
                "dilations" => cfg.dilations = list()?.try_into().map_err(|_| bad(line))?,
                "lsff_kernel" => cfg.lsff_kernel = value.parse().map_err(|_| bad(line))?,
                "deep_supervision" => cfg.deep_supervision = value.parse().map_err(|_| bad(line))?,
                "encoder" => cfg.encoder = value.to_string(),
                "attention" => cfg.attention = value.to_string(),
                "fusion" => cfg.fusion = value.to_string(),
                _ => return Err(bad(line)),
            }
        }
        Ok(cfg)
    }
}

/// Initial head bias: the logit of a 1% foreground prior, so training
/// starts near the empty prediction instead of p = 0.5 everywhere.
pub const HEAD_BIAS: f64 = -4.59511985013459;

/// Head logits, final head first, each `N×1×H×W`.
pub struct NetOutputs<'t, T: Real> {
    pub logits: Vec<Var<'t, T>>,
}

struct EncoderStage<T: Real> {
    block: Box<dyn EncoderBlock<T>>,
    attention: Box<dyn ChannelAttention<T>>,
}

struct DecoderStage<T: Real> {
    reduce: ConvUnit,
    fusion: Box<dyn SkipFusion<T>>,
    head: Option<Conv2d>,
}

pub struct Model<T: Real> {
    config: NetConfig,
    store: ParamStore<T>,
    encoder: Vec<EncoderStage<T>>,
    /// Deepest first: stage 4 down to stage 1.
    decoder: Vec<DecoderStage<T>>,
}

impl<T: Real> Model<T> {
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, seed, &Strategies::builtin())
    }

    pub fn build_with(config: NetConfig, seed: u64, strategies: &Strategies<T>) -> Result<Self> {
        config.validate()?;
        let make_block = strategies.encoders.get(&config.encoder)?;
        let make_attention = strategies.attentions.get(&config.attention)?;
        let make_fusion = strategies.fusions.get(&config.fusion)?;

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = ParamBuilder::new(&mut store, &mut rng);
        let ch = &config.channels;
        let spec = |i: usize, c_in: usize| StageSpec {
            index: i,
            c_in,
            c_out: ch[i - 1],
            offset_o: config.offset_o,
            dilations: config.dilations,
            lsff_kernel: config.lsff_kernel,
        };

        let mut encoder = Vec::with_capacity(5);
        for i in 1..=5 {
            let c_in = if i == 1 { config.input_channels } else { ch[i - 2] };
            let s = spec(i, c_in);
            let mut b = root.scope(&format!("enc{i}"));
            encoder.push(EncoderStage {
                block: make_block(&mut b, &s)?,
                attention: make_attention(&mut b, &s)?,
            });
        }
        let mut decoder = Vec::with_capacity(4);
        for j in (1..=4).rev() {
            let s = spec(j, ch[j]);
            let mut b = root.scope(&format!("dec{j}"));
            let reduce = b.conv_unit("reduce", ch[j], ch[j - 1], 1, ConvGeometry::default(), false)?;
            let fusion = make_fusion(&mut b, &s)?;
            let head = if j == 1 || config.deep_supervision {
                let head = b.conv("head", ch[j - 1], 1, 1, ConvGeometry::default(), true)?;
                let bias = head.bias.expect("head has a bias");
                b.store().set(bias, Tensor::full(&[1], T::of(HEAD_BIAS)))?;
                Some(head)
            } else {
                None
            };
            decoder.push(DecoderStage { reduce, fusion, head });
        }
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn head_count(&self) -> usize {
        self.decoder.iter().filter(|d| d.head.is_some()).count()
    }

    pub fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<NetOutputs<'t, T>> {
        let shape = x.shape();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::InvalidNetwork(format!("expected N×C×H×W input, got {shape:?}")));
        };
        if c != self.config.input_channels {
            return Err(Error::InvalidNetwork(format!(
                "expected {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidNetwork(format!(
                "input {h}×{w} is not a positive multiple of 16"
            )));
        }

        let mut skips = Vec::with_capacity(5);
        let mut y = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                y = max_pool2(y)?;
            }
            y = stage.block.forward(s, y)?;
            y = stage.attention.forward(s, y)?;
            skips.push(y);
        }

        let mut heads = Vec::with_capacity(4);
        for (stage, skip) in self.decoder.iter().zip(skips[..4].iter().rev()) {
            let up = bilinear_upsample2(y)?;
            let reduced = stage.reduce.forward(s, up)?;
            y = stage.fusion.fuse(s, *skip, reduced)?;
            if let Some(head) = &stage.head {
                heads.push(head.forward(s, y)?);
            }
        }
        // Collected deepest first; the final head is last.
        let mut logits = Vec::with_capacity(heads.len());
        logits.push(*heads.last().expect("final head always exists"));
        for v in heads[..heads.len() - 1].iter().rev() {
            logits.push(bilinear_resize(*v, h, w)?);
        }
        Ok(NetOutputs { logits })
    }

    /// Head logits without gradient tracking.
    pub fn logits(&self, x: &Tensor<T>, training: bool) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store, training, false);
        let out = self.forward(&s, tape.constant(x.clone()))?;
        Ok(out.logits.iter().map(|v| (*v.value()).clone()).collect())
    }

    /// Sigmoid of the final head in inference mode.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let s = Session::inference(&tape, &self.store);
        let out = self.forward(&s, tape.constant(x.clone()))?;
        Ok(out.logits[0].sigmoid().value().as_ref().clone())
    }
}
