//! The full recognizer: speech encoder with CTC head, optional visual
//! encoder, and the fusion decoder, sharing one parameter table.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::data::Utterance;
use crate::encoder::{self, AudioFeatures, EncoderConfig};
use crate::error::{Error, Result};
use crate::mfd_decoder::{self, beam_decode, decoder_forward, DecoderConfig, Hypothesis};
use crate::numerics::{Binder, Graph, ParamStore, Var};
use crate::visual_encoder::{self, encode_visual, VisualFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Size of the shared text vocabulary (speech labels and OCR tokens).
    pub text_vocab: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Reproduces a frozen external OCR feature extractor when set.
    pub visual_frozen: bool,
}

impl ModelConfig {
    pub fn new(text_vocab: usize, encoder: EncoderConfig, mut decoder: DecoderConfig, visual_frozen: bool) -> Result<Self> {
        decoder.vocab_size = text_vocab + 2;
        let cfg = Self {
            text_vocab,
            encoder,
            decoder,
            visual_frozen,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.vocab_size != self.text_vocab + 2 {
            return Err(Error::Config(format!(
                "decoder vocab_size {} must be text_vocab + 2 = {}",
                self.decoder.vocab_size,
                self.text_vocab + 2
            )));
        }
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder d_model {} differs from decoder d_model {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        Ok(())
    }

    /// Blank plus the text vocabulary.
    pub fn ctc_classes(&self) -> usize {
        self.text_vocab + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "audio")]
    Audio,
    #[serde(rename = "audio+visual")]
    AudioVisual,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "audio+visual" => Ok(Modality::AudioVisual),
            _ => Err(Error::Config(format!("unknown modality `{s}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::AudioVisual => "audio+visual",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Whether the visual encoder and visual decoder branches exist.
    pub fusion: bool,
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass over an utterance.
pub struct Forward {
    pub audio: AudioFeatures,
    pub visual: VisualFeatures,
    pub ctc_log_probs: Var,
}

impl Model {
    /// Audio-only model with freshly initialized encoder and decoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, config.ctc_classes(), &mut params, &mut rng)?;
        mfd_decoder::init_params(&config.decoder, &mut params, &mut rng)?;
        Ok(Self {
            config,
            fusion: false,
            params,
        })
    }

    /// Adds freshly initialized visual encoder and visual decoder branches,
    /// leaving every existing parameter untouched.
    pub fn enable_fusion(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
        visual_encoder::init_params(self.config.text_vocab, self.config.decoder.d_model, &mut self.params, &mut rng);
        mfd_decoder::init_fusion_params(&self.config.decoder, &mut self.params, &mut rng);
        self.fusion = true;
    }

    /// Parameter shapes implied by the config.
    pub fn expected_shapes(config: &ModelConfig, fusion: bool) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut m = Model::new(config.clone(), 0)?;
        if fusion {
            m.enable_fusion(0);
        }
        Ok(m.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect())
    }

    /// Prefixes that must stay fixed whatever the optimizer does.
    pub fn frozen_prefixes(&self, freeze_encoder: bool) -> Vec<String> {
        let mut out = Vec::new();
        if freeze_encoder {
            out.push(format!("{}.", encoder::PREFIX));
        }
        if self.config.visual_frozen {
            out.push(format!("{}.", visual_encoder::PREFIX));
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder<'_>, utt: &Utterance, modality: Modality) -> Result<Forward> {
        let input = g.constant(utt.audio.clone());
        let audio = encoder::encode_audio(g, input, &self.config.encoder, b)?;
        let head = b.bind(g, encoder::CTC_HEAD)?;
        let ctc_log_probs = encoder::ctc_head(g, &audio, head)?;
        let visual = self.visual_features(g, b, utt, modality)?;
        Ok(Forward {
            audio,
            visual,
            ctc_log_probs,
        })
    }

    fn visual_features(&self, g: &mut Graph, b: &Binder<'_>, utt: &Utterance, modality: Modality) -> Result<VisualFeatures> {
        match modality {
            Modality::Audio => Ok(VisualFeatures::empty()),
            Modality::AudioVisual if !self.fusion => Err(Error::Config(
                "audio+visual modality requested from an audio-only model".into(),
            )),
            Modality::AudioVisual => encode_visual(
                g,
                &utt.ocr,
                b,
                self.config.decoder.n_heads,
                self.config.visual_frozen,
            ),
        }
    }

    /// Teacher-forced decoder logits for `BOS + ref`.
    pub fn decoder_logits(&self, g: &mut Graph, b: &Binder<'_>, fwd: &Forward, ref_tokens: &[usize]) -> Result<Var> {
        let mut input = Vec::with_capacity(ref_tokens.len() + 1);
        input.push(self.config.decoder.bos());
        input.extend_from_slice(ref_tokens);
        decoder_forward(g, &input, &fwd.audio, &fwd.visual, &self.config.decoder, b)
    }

    /// Beam decoding. `max_len` defaults to the encoder frame count + 1.
    pub fn decode(&self, utt: &Utterance, modality: Modality, beam: usize, max_len: Option<usize>) -> Result<Hypothesis> {
        let mut g = Graph::new();
        let b = Binder::frozen_all(&self.params);
        let fwd = self.forward(&mut g, &b, utt, modality)?;
        let max_len = max_len.unwrap_or(fwd.audio.t_len + 1);
        beam_decode(&mut g, &fwd.audio, &fwd.visual, &self.config.decoder, &b, beam, max_len)
    }

    /// Greedy CTC transcript from the encoder head.
    pub fn ctc_decode(&self, utt: &Utterance) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let b = Binder::frozen_all(&self.params);
        let fwd = self.forward(&mut g, &b, utt, Modality::Audio)?;
        Ok(ctc::ctc_greedy(g.value(fwd.ctc_log_probs)))
    }
}
