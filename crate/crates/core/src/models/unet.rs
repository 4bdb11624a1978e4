//! Two-level U-Net used for encryption, decryption and the attack generator.

use djescc_autograd::{Float, ParamLayout, Tape, Var};

use super::layers::{Builder, Cursor};

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub channels: usize,
    pub width: usize,
}

impl UNet {
    pub fn layout(&self) -> ParamLayout {
        let (c, w) = (self.channels, self.width);
        let mut b = Builder::new();
        b.conv("enc0", c, w, 3, true);
        b.prelu("enc0", w);
        b.conv("enc1", w, w, 3, true);
        b.prelu("enc1", w);
        b.conv("mid0", w, 2 * w, 3, true);
        b.prelu("mid0", 2 * w);
        b.conv("mid1", 2 * w, 2 * w, 3, true);
        b.prelu("mid1", 2 * w);
        b.conv_t("up", 2 * w, w, 2, 2);
        b.prelu("up", w);
        b.conv("dec0", 2 * w, w, 3, true);
        b.prelu("dec0", w);
        b.conv("dec1", w, w, 3, true);
        b.prelu("dec1", w);
        b.conv("out", w, c, 1, true);
        b.finish()
    }

    /// Same-size image to image map with outputs in `(0, 1)`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, params: &[Var], x: Var) -> Var {
        let (_, c, h, w) = tape.value(x).dims4();
        assert_eq!(c, self.channels, "U-Net expects {} channels, got {c}", self.channels);
        assert!(h % 2 == 0 && w % 2 == 0, "U-Net input {h}x{w} must have even sides");
        let mut p = Cursor::new(params);
        let mut e = p.conv(tape, x, 1, 1);
        e = p.prelu(tape, e);
        e = p.conv(tape, e, 1, 1);
        let skip = p.prelu(tape, e);
        let mut m = tape.max_pool2(skip);
        m = p.conv(tape, m, 1, 1);
        m = p.prelu(tape, m);
        m = p.conv(tape, m, 1, 1);
        m = p.prelu(tape, m);
        let mut u = p.conv_t(tape, m, 2, 0, 0);
        u = p.prelu(tape, u);
        let cat = tape.concat_channels(u, skip);
        let mut d = p.conv(tape, cat, 1, 1);
        d = p.prelu(tape, d);
        d = p.conv(tape, d, 1, 1);
        d = p.prelu(tape, d);
        let out = p.conv(tape, d, 1, 0);
        p.done();
        tape.sigmoid(out)
    }
}
