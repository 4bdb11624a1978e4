//! Parameter declaration and consumption helpers shared by the networks.

use djescc_autograd::{Float, Init, ParamLayout, Tape, Var};

/// Declares parameters in the order a forward pass will consume them.
pub(crate) struct Builder {
    pub layout: ParamLayout,
}

impl Builder {
    pub fn new() -> Self {
        Self {
            layout: ParamLayout::new(),
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.layout.add(
            format!("{name}.w"),
            &[cout, cin, k, k],
            Init::HeUniform { fan_in: cin * k * k },
        );
        if bias {
            self.layout.add(format!("{name}.b"), &[cout], Init::Constant(0.0));
        }
    }

    /// Transposed convolution: each output pixel sees `cin·k²/s²` inputs.
    pub fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) {
        self.layout.add(
            format!("{name}.w"),
            &[cin, cout, k, k],
            Init::HeUniform {
                fan_in: (cin * k * k / (stride * stride)).max(1),
            },
        );
        self.layout.add(format!("{name}.b"), &[cout], Init::Constant(0.0));
    }

    pub fn prelu(&mut self, name: &str, channels: usize) {
        self.layout.add(format!("{name}.a"), &[channels], Init::Constant(0.25));
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.layout.add(format!("{name}.gamma"), &[channels], Init::Constant(1.0));
        self.layout.add(format!("{name}.beta"), &[channels], Init::Constant(0.0));
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.layout
            .add(format!("{name}.w"), &[dout, din], Init::HeUniform { fan_in: din });
        self.layout.add(format!("{name}.b"), &[dout], Init::Constant(0.0));
    }

    pub fn finish(self) -> ParamLayout {
        self.layout
    }
}

/// Walks bound parameter handles in declaration order.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn done(&self) {
        assert_eq!(self.pos, self.vars.len(), "forward pass left parameters unused");
    }

    pub fn conv<F: Float>(&mut self, tape: &mut Tape<F>, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.next();
        let b = self.next();
        tape.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn conv_t<F: Float>(
        &mut self,
        tape: &mut Tape<F>,
        x: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let w = self.next();
        let b = self.next();
        tape.conv_transpose2d(x, w, Some(b), stride, pad, out_pad)
    }

    pub fn prelu<F: Float>(&mut self, tape: &mut Tape<F>, x: Var) -> Var {
        let a = self.next();
        tape.prelu(x, a)
    }
}
