use super::{gemm_nn, gemm_nt, gemm_tn, Graph, Var};
use crate::error::{Error, Result};

impl Graph {
    /// Matrix product of `a[M×K]` and `b[K×N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank("matmul", a, 2)?;
        let sb = self.expect_rank("matmul", b, 2)?;
        if sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = self.with2(a, b, |x, _, y, _| {
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, x, y, &mut c);
            c
        });
        Ok(self.push(vec![m, n], out, &[a, b], move |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_nt(m, n, k, ctx.grad, y, &mut ga);
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn(k, m, n, x, ctx.grad, &mut gb);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Batched matrix product of `a[B×M×K]` and `b[B×K×N]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank("bmm", a, 3)?;
        let sb = self.expect_rank("bmm", b, 3)?;
        if sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", format!("incompatible batched shapes {sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = self.with2(a, b, |x, _, y, _| {
            let mut c = vec![0.0; batch * m * n];
            for t in 0..batch {
                gemm_nn(m, k, n, &x[t * m * k..], &y[t * k * n..], &mut c[t * m * n..(t + 1) * m * n]);
            }
            c
        });
        Ok(self.push(vec![batch, m, n], out, &[a, b], move |ctx| {
            let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for t in 0..batch {
                    gemm_nt(m, n, k, &g[t * m * n..], &y[t * k * n..], &mut ga[t * m * k..(t + 1) * m * k]);
                }
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for t in 0..batch {
                    gemm_tn(k, m, n, &x[t * m * k..], &g[t * m * n..], &mut gb[t * k * n..(t + 1) * k * n]);
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}
