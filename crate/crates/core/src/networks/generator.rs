use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{AdainBlock, Builder, Conv, SpadeBlock, LRELU_SLOPE};
use super::{ArchConfig, TraceRow};
use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three convolutions with instance normalization and ReLU; the last two
/// halve the resolution.
#[derive(Clone, Debug)]
struct Encoder {
    convs: [Conv; 3],
}

impl Encoder {
    fn new(b: &mut Builder, in_ch: usize, widths: [usize; 3]) -> Self {
        let [c1, c2, c3] = widths;
        Encoder {
            convs: [
                Conv::unbiased(b, "enc1", in_ch, c1, 7, 1, 3),
                Conv::unbiased(b, "enc2", c1, c2, 3, 2, 1),
                Conv::unbiased(b, "enc3", c2, c3, 3, 2, 1),
            ],
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        trace: &mut Vec<TraceRow>,
    ) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(tape, store, h)?;
            let y = tape.instance_norm(y, super::IN_EPS)?;
            h = tape.relu(y);
            trace.push(TraceRow::new(
                format!("{0}x{0} conv-{1}", conv.kernel, conv.out_ch),
                tape.value(h).shape(),
            ));
            out.push(h);
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// Multi-scale features of the reference pair, shared by every driving frame.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub features: [Var; 3],
}

/// Dense flow network: encodes the reference image and its face map, then
/// decodes a flow field under SPADE modulation by the driving maps.
#[derive(Clone, Debug)]
pub struct FlowNet {
    encoder: Encoder,
    spade3: [SpadeBlock; 3],
    spade2: SpadeBlock,
    out: Conv,
}

impl FlowNet {
    fn new(b: &mut Builder, arch: &ArchConfig) -> Self {
        let [c1, c2, c3] = arch.widths;
        let m = arch.driving_channels();
        let hid = arch.spade_hidden;
        b.scope("flow", |b| FlowNet {
            encoder: Encoder::new(b, 6, arch.widths),
            spade3: [
                SpadeBlock::new(b, "spade3a", c3, m, hid),
                SpadeBlock::new(b, "spade3b", c3, m, hid),
                SpadeBlock::new(b, "spade3c", c3, m, hid),
            ],
            spade2: SpadeBlock::new(b, "spade2", c2, m, hid),
            // Small initial flows keep early warps close to the identity.
            out: Conv::create(b, "out", [c1, 2, 7, 1, 3], 0.1, true),
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        reference_image: Var,
        reference_map: Var,
        trace: &mut Vec<TraceRow>,
    ) -> Result<Encoded> {
        let x = tape.concat_channels(&[reference_image, reference_map])?;
        trace.push(TraceRow::new("Input", tape.value(x).shape()));
        Ok(Encoded {
            features: self.encoder.forward(tape, store, x, trace)?,
        })
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &Encoded,
        driving: Var,
        trace: &mut Vec<TraceRow>,
    ) -> Result<Var> {
        let half = tape.downsample2(driving)?;
        let quarter = tape.downsample2(half)?;
        let mut h = enc.features[2];
        for block in &self.spade3 {
            h = block.forward(tape, store, h, quarter)?;
            trace.push(TraceRow::new("SPADE Block", tape.value(h).shape()));
        }
        h = tape.pixel_shuffle(h, 2)?;
        trace.push(TraceRow::new("Pixel Shuffle", tape.value(h).shape()));
        h = self.spade2.forward(tape, store, h, half)?;
        trace.push(TraceRow::new("SPADE Block", tape.value(h).shape()));
        h = tape.pixel_shuffle(h, 2)?;
        trace.push(TraceRow::new("Pixel Shuffle", tape.value(h).shape()));
        let flow = self.out.forward(tape, store, h)?;
        trace.push(TraceRow::new("7x7 conv-2", tape.value(flow).shape()));
        Ok(flow)
    }
}

/// Rendering network: encodes the driving maps and decodes an RGB frame with
/// alternating SPADE (warped features) and AdaIN (audio) blocks.
#[derive(Clone, Debug)]
pub struct RenderNet {
    encoder: Encoder,
    spade: [SpadeBlock; 4],
    adain: [AdainBlock; 3],
    out: Conv,
}

impl RenderNet {
    fn new(b: &mut Builder, arch: &ArchConfig) -> Self {
        let [c1, c2, c3] = arch.widths;
        let hid = arch.spade_hidden;
        let a = arch.audio_dim;
        b.scope("render", |b| RenderNet {
            encoder: Encoder::new(b, arch.driving_channels(), arch.widths),
            spade: [
                SpadeBlock::new(b, "spade3", c3, c3, hid),
                SpadeBlock::new(b, "spade2", c2, c2, hid),
                SpadeBlock::new(b, "spade1", c1, c1, hid),
                SpadeBlock::new(b, "spade_ref", c1, 3, hid),
            ],
            adain: [
                AdainBlock::new(b, "adain3", c3, a),
                AdainBlock::new(b, "adain2", c2, a),
                AdainBlock::new(b, "adain1", c1, a),
            ],
            out: Conv::same(b, "out", c1, 3, 7),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        driving: Var,
        warped: [Var; 3],
        warped_reference: Var,
        audio: Var,
        trace: &mut Vec<TraceRow>,
    ) -> Result<Var> {
        trace.push(TraceRow::new("Input", tape.value(driving).shape()));
        let [_, _, e3] = self.encoder.forward(tape, store, driving, trace)?;
        let mut h = e3;
        for level in 0..3 {
            h = self.spade[level].forward(tape, store, h, warped[2 - level])?;
            trace.push(TraceRow::new("SPADE Block", tape.value(h).shape()));
            h = self.adain[level].forward(tape, store, h, audio)?;
            trace.push(TraceRow::new("AdaIN Block", tape.value(h).shape()));
            if level < 2 {
                h = tape.pixel_shuffle(h, 2)?;
                trace.push(TraceRow::new("Pixel Shuffle", tape.value(h).shape()));
            }
        }
        h = self.spade[3].forward(tape, store, h, warped_reference)?;
        trace.push(TraceRow::new("SPADE Block", tape.value(h).shape()));
        let h = tape.leaky_relu(h, LRELU_SLOPE);
        let h = self.out.forward(tape, store, h)?;
        let frame = tape.tanh(h);
        trace.push(TraceRow::new(
            "LReLU 7x7 conv-3 tanh",
            tape.value(frame).shape(),
        ));
        Ok(frame)
    }
}

/// Inputs already placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInput {
    /// `[N, 3(k+1), H, W]` stack of the current and past driving face maps.
    pub driving: Var,
    pub reference_image: Var,
    pub reference_map: Var,
    /// `[N, audio_dim]`.
    pub audio: Var,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub frame: Var,
    pub flow: Var,
    pub encoded: Encoded,
    pub warped: [Var; 3],
    pub warped_reference: Var,
    pub flow_trace: Vec<TraceRow>,
    pub render_trace: Vec<TraceRow>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub flow: FlowNet,
    pub render: RenderNet,
    /// When false the flow decoder is bypassed and every warp uses zero flow.
    pub use_flow: bool,
}

impl Generator {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let flow = FlowNet::new(&mut b, arch);
        let render = RenderNet::new(&mut b, arch);
        Ok(Generator {
            arch: arch.clone(),
            store,
            flow,
            render,
            use_flow: true,
        })
    }

    fn check_input(&self, tape: &Tape, input: &GeneratorInput) -> Result<usize> {
        let r = self.arch.resolution;
        let (n, c, h, w) = tape.value(input.driving).dims4()?;
        if (c, h, w) != (self.arch.driving_channels(), r, r) {
            return Err(Error::Shape(format!(
                "driving maps {:?} do not match the architecture",
                tape.value(input.driving).shape()
            )));
        }
        for v in [input.reference_image, input.reference_map] {
            if tape.value(v).shape() != [n, 3, r, r] {
                return Err(Error::Shape(format!(
                    "reference input {:?}, expected [{n}, 3, {r}, {r}]",
                    tape.value(v).shape()
                )));
            }
        }
        if tape.value(input.audio).shape() != [n, self.arch.audio_dim] {
            return Err(Error::Shape(format!(
                "audio input {:?}, expected [{n}, {}]",
                tape.value(input.audio).shape(),
                self.arch.audio_dim
            )));
        }
        Ok(n)
    }

    /// Flow for one driving stack; zero when the flow decoder is disabled.
    pub fn predict_flow(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        driving: Var,
        trace: &mut Vec<TraceRow>,
    ) -> Result<Var> {
        if self.use_flow {
            self.flow.decode(tape, &self.store, enc, driving, trace)
        } else {
            let (n, _, h, w) = tape.value(driving).dims4()?;
            Ok(tape.constant(Tensor::zeros(&[n, 2, h, w])))
        }
    }

    /// Warps each encoder level with the flow brought to its resolution.
    pub fn warp_pyramid(&self, tape: &mut Tape, enc: &Encoded, flow: Var) -> Result<[Var; 3]> {
        let f2 = tape.downsample_flow(flow)?;
        let f3 = tape.downsample_flow(f2)?;
        Ok([
            tape.warp(enc.features[0], flow)?,
            tape.warp(enc.features[1], f2)?,
            tape.warp(enc.features[2], f3)?,
        ])
    }

    pub fn forward(&self, tape: &mut Tape, input: &GeneratorInput) -> Result<GeneratorOutput> {
        self.check_input(tape, input)?;
        let mut flow_trace = Vec::new();
        let enc = self.flow.encode(
            tape,
            &self.store,
            input.reference_image,
            input.reference_map,
            &mut flow_trace,
        )?;
        let flow = self.predict_flow(tape, &enc, input.driving, &mut flow_trace)?;
        let warped = self.warp_pyramid(tape, &enc, flow)?;
        let warped_reference = tape.warp(input.reference_image, flow)?;
        let mut render_trace = Vec::new();
        let frame = self.render.forward(
            tape,
            &self.store,
            input.driving,
            warped,
            warped_reference,
            input.audio,
            &mut render_trace,
        )?;
        Ok(GeneratorOutput {
            frame,
            flow,
            encoded: enc,
            warped,
            warped_reference,
            flow_trace,
            render_trace,
        })
    }

    /// Plain inference on tensors, returning the frame `[N, 3, H, W]`.
    pub fn generate(
        &self,
        driving: &Tensor,
        reference_image: &Tensor,
        reference_map: &Tensor,
        audio: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = GeneratorInput {
            driving: tape.constant(driving.clone()),
            reference_image: tape.constant(reference_image.clone()),
            reference_map: tape.constant(reference_map.clone()),
            audio: tape.constant(audio.clone()),
        };
        let out = self.forward(&mut tape, &input)?;
        Ok(tape.value(out.frame).clone())
    }
}
