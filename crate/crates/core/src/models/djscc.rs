//! Joint source-channel encoder and decoder.
//!
//! The encoder is five 5×5 convolutions with strides (2,2,1,1,1), each
//! followed by PReLU; its output is flattened to `2k` reals per image and
//! power-normalized. The decoder mirrors it with transposed convolutions
//! and ends in a sigmoid.

use djescc_autograd::{Float, ParamLayout, Tape, Var};

use super::layers::{Builder, Cursor};

const K: usize = 5;
const PAD: usize = 2;
const ENC_STRIDES: [usize; 5] = [2, 2, 1, 1, 1];
const DEC_STRIDES: [usize; 5] = [1, 1, 1, 2, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct JsccEncoder {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub t: usize,
}

impl JsccEncoder {
    fn channels(&self) -> [usize; 6] {
        let w = self.widths;
        [self.in_channels, w[0], w[1], w[2], w[3], self.t]
    }

    pub fn layout(&self) -> ParamLayout {
        let c = self.channels();
        let mut b = Builder::new();
        for i in 0..5 {
            b.conv(&format!("conv{i}"), c[i], c[i + 1], K, true);
            b.prelu(&format!("prelu{i}"), c[i + 1]);
        }
        b.finish()
    }

    /// Complex symbols per image: `h·w·t/32`.
    pub fn symbols_per_image(&self, h: usize, w: usize) -> usize {
        h / 4 * (w / 4) * self.t / 2
    }

    /// `(N, C, H, W)` to power-normalized `(N, 2k)`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, params: &[Var], y: Var) -> Var {
        let (n, _, h, w) = tape.value(y).dims4();
        assert!(h % 4 == 0 && w % 4 == 0, "encoder input {h}x{w} not divisible by 4");
        let mut p = Cursor::new(params);
        let mut x = y;
        for s in ENC_STRIDES {
            x = p.conv(tape, x, s, PAD);
            x = p.prelu(tape, x);
        }
        p.done();
        let flat = tape.reshape(x, &[n, self.t * (h / 4) * (w / 4)]);
        tape.power_normalize(flat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsccDecoder {
    pub out_channels: usize,
    pub widths: [usize; 4],
    pub t: usize,
}

impl JsccDecoder {
    fn channels(&self) -> [usize; 6] {
        let w = self.widths;
        [self.t, w[3], w[2], w[1], w[0], self.out_channels]
    }

    pub fn layout(&self) -> ParamLayout {
        let c = self.channels();
        let mut b = Builder::new();
        for i in 0..5 {
            b.conv_t(&format!("convt{i}"), c[i], c[i + 1], K, DEC_STRIDES[i]);
            if i < 4 {
                b.prelu(&format!("prelu{i}"), c[i + 1]);
            }
        }
        b.finish()
    }

    /// `(N, 2k)` received reals to `(N, C, h, w)` images.
    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<F>,
        params: &[Var],
        zhat: Var,
        h: usize,
        w: usize,
    ) -> Var {
        let (n, len) = tape.value(zhat).dims2();
        assert_eq!(
            len,
            self.t * (h / 4) * (w / 4),
            "{len} received reals do not fit a {h}x{w} image with t={}",
            self.t
        );
        let mut p = Cursor::new(params);
        let mut x = tape.reshape(zhat, &[n, self.t, h / 4, w / 4]);
        for (i, s) in DEC_STRIDES.into_iter().enumerate() {
            x = p.conv_t(tape, x, s, PAD, s - 1);
            if i < 4 {
                x = p.prelu(tape, x);
            }
        }
        p.done();
        tape.sigmoid(x)
    }
}
