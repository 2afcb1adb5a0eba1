use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Encoder/decoder depth `L`.
    pub depth: usize,
    /// Number of resolutions inside an inner-scale block, `K`.
    pub block_scales: usize,
    /// Groups of the 3×3 convolutions inside a block.
    pub groups: usize,
    /// Feature width `C`.
    pub channels: usize,
    /// LeakyReLU slope.
    pub alpha: f64,
    /// Number of sub-networks; sub-network `s` sees the input at `1 / 2^s`.
    pub scales: usize,
    pub image_channels: usize,
    /// Add encoder layer `l` to decoder layer `l`.
    pub skip: bool,
    /// Feed every previous layer (not just the last) into each layer's fusion.
    pub dense: bool,
    /// Feed coarser block branches into finer ones.
    pub inner_connection: bool,
}

impl NetConfig {
    /// `L = 16`, `K = 3`, `n = 4`, 32 channels, LeakyReLU 0.2, three scales.
    pub fn full() -> Self {
        NetConfig {
            depth: 16,
            block_scales: 3,
            groups: 4,
            channels: 32,
            alpha: 0.2,
            scales: 3,
            image_channels: 3,
            skip: true,
            dense: true,
            inner_connection: true,
        }
    }

    /// Small network used for gradient checks and quick experiments.
    pub fn tiny() -> Self {
        NetConfig {
            depth: 2,
            channels: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.depth < 1 {
            return fail("depth L must be at least 1".into());
        }
        if !(1..=4).contains(&self.block_scales) {
            return fail(format!("block scales K = {} outside 1..=4", self.block_scales));
        }
        if self.channels == 0 || self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return fail(format!(
                "channels {} must be a positive multiple of groups {}",
                self.channels, self.groups
            ));
        }
        if self.scales < 1 || self.scales > 8 {
            return fail(format!("sub-network scales S = {} outside 1..=8", self.scales));
        }
        if self.image_channels == 0 {
            return fail("image_channels must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("LeakyReLU slope {} outside (0, 1)", self.alpha));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales - 1 + self.block_scales - 1)
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} is not a multiple of {m} (2^(S-1) * 2^(K-1))"
            )));
        }
        Ok(())
    }

    /// Input width of the fusion conv in front of encoder layer `l` (1-based).
    pub fn encoder_fusion_width(&self, l: usize) -> usize {
        if self.dense {
            l * self.channels
        } else {
            self.channels
        }
    }

    /// Decoder layer `l` fuses `F_0^D … F_{l-1}^D`, the same width as the encoder.
    pub fn decoder_fusion_width(&self, l: usize) -> usize {
        self.encoder_fusion_width(l)
    }

    /// Parses `key=value` pairs separated by commas, starting from a preset
    /// (`full` or `tiny`) if the first item names one.
    ///
    /// Keys: `depth`/`L`, `k`/`K`, `groups`/`n`, `channels`/`C`, `alpha`,
    /// `scales`/`S`, `skip`, `dense`, `inner`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut items = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).peekable();
        let mut cfg = match items.peek() {
            Some(&"full") => {
                items.next();
                Self::full()
            }
            Some(&"tiny") => {
                items.next();
                Self::tiny()
            }
            _ => Self::full(),
        };
        for item in items {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{item}`")))?;
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("`{key}` needs an integer, got `{value}`")))
            };
            let flag = || match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::InvalidConfig(format!("`{key}` needs on/off, got `{value}`"))),
            };
            match key {
                "depth" | "L" => cfg.depth = num()?,
                "k" | "K" => cfg.block_scales = num()?,
                "groups" | "n" => cfg.groups = num()?,
                "channels" | "C" => cfg.channels = num()?,
                "scales" | "S" => cfg.scales = num()?,
                "alpha" => {
                    cfg.alpha = value
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad alpha `{value}`")))?
                }
                "skip" => cfg.skip = flag()?,
                "dense" => cfg.dense = flag()?,
                "inner" => cfg.inner_connection = flag()?,
                _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
