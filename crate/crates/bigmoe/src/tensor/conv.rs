//! Convolution-family operations: 2-D cross-correlation, the center-tap
//! sampling used by central-difference convolution, and the 1-D channel
//! convolution used by ECA.

use super::Tensor;
use crate::error::{Error, Result};

pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tensor {
    /// 2-D cross-correlation: `x [Ci,H,W]`, `w [Co,Ci,kh,kw]`, optional bias
    /// `[Co]`. Output extent is `floor((H + 2p - kh)/stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d expects x [C,H,W] and w [Co,Ci,kh,kw], got {xs:?} / {ws:?}"
            )));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ci != wci {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input {ci} vs kernel {wci}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::Dim(format!(
                    "conv2d bias shape {:?} != [{co}]",
                    b.shape()
                )));
            }
        }
        let ho = conv2d_out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::Dim(format!("conv2d kernel {kh}x{kw} larger than padded input")))?;
        let wo = conv2d_out_extent(w, kw, stride, padding)
            .ok_or_else(|| Error::Dim(format!("conv2d kernel {kh}x{kw} larger than padded input")))?;

        let xd = self.data();
        let wd = weight.data();
        let bd: Option<Vec<f64>> = bias.map(|b| b.to_vec());
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            let base_b = bd.as_ref().map_or(0.0, |b| b[oc]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = base_b;
                    for ic in 0..ci {
                        for r in 0..kh {
                            let ih = (oh * stride + r) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let iw = (ow * stride + c) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += xd[ic * h * w + ih as usize * w + iw as usize]
                                    * wd[((oc * ci + ic) * kh + r) * kw + c];
                            }
                        }
                    }
                    out[oc * ho * wo + oh * wo + ow] = acc;
                }
            }
        }
        drop(xd);
        drop(wd);

        let px = self.clone();
        let pw = weight.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![co, ho, wo],
            parents,
            Box::new(move |g, _| {
                let xd = px.data().to_vec();
                let wd = pw.data().to_vec();
                let mut gx = vec![0.0; ci * h * w];
                let mut gw = vec![0.0; co * ci * kh * kw];
                let mut gb = vec![0.0; co];
                for oc in 0..co {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let go = g[oc * ho * wo + oh * wo + ow];
                            if go == 0.0 {
                                continue;
                            }
                            gb[oc] += go;
                            for ic in 0..ci {
                                for r in 0..kh {
                                    let ih = (oh * stride + r) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for c in 0..kw {
                                        let iw = (ow * stride + c) as isize - padding as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        let xi = ic * h * w + ih as usize * w + iw as usize;
                                        let wi = ((oc * ci + ic) * kh + r) * kw + c;
                                        gx[xi] += go * wd[wi];
                                        gw[wi] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                px.accum_grad(&gx);
                pw.accum_grad(&gw);
                if let Some(b) = &pb {
                    b.accum_grad(&gb);
                }
            }),
        ))
    }

    /// Samples the input pixel aligned with the kernel center for every
    /// output location of a `kh x kw` convolution (zero where the center
    /// falls into padding). Combined with [`Tensor::tap_sum`] this forms the
    /// difference term of central-difference convolution.
    pub fn center_sample(
        &self,
        stride: usize,
        padding: usize,
        kh: usize,
        kw: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::Dim(format!("center_sample expects [C,H,W], got {xs:?}")));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let ho = conv2d_out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::Dim("center_sample kernel larger than padded input".into()))?;
        let wo = conv2d_out_extent(w, kw, stride, padding)
            .ok_or_else(|| Error::Dim("center_sample kernel larger than padded input".into()))?;
        let xd = self.data();
        let mut out = vec![0.0; ci * ho * wo];
        let mut src: Vec<Option<usize>> = vec![None; ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let ihc = (oh * stride + kh / 2) as isize - padding as isize;
                let iwc = (ow * stride + kw / 2) as isize - padding as isize;
                if ihc >= 0 && ihc < h as isize && iwc >= 0 && iwc < w as isize {
                    src[oh * wo + ow] = Some(ihc as usize * w + iwc as usize);
                }
            }
        }
        for ic in 0..ci {
            for (o, s) in src.iter().enumerate() {
                if let Some(si) = s {
                    out[ic * ho * wo + o] = xd[ic * h * w + si];
                }
            }
        }
        drop(xd);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![ci, ho, wo],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; ci * h * w];
                for ic in 0..ci {
                    for (o, s) in src.iter().enumerate() {
                        if let Some(si) = s {
                            gx[ic * h * w + si] += g[ic * ho * wo + o];
                        }
                    }
                }
                p.accum_grad(&gx);
            }),
        ))
    }

    /// Sum of kernel taps per (out-channel, in-channel): `[Co,Ci,kh,kw] -> [Co,Ci]`.
    pub fn tap_sum(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dim(format!("tap_sum expects 4-D kernel, got {s:?}")));
        }
        let (co, ci, kh, kw) = (s[0], s[1], s[2], s[3]);
        let taps = kh * kw;
        let d = self.data();
        let out: Vec<f64> = (0..co * ci)
            .map(|i| d[i * taps..(i + 1) * taps].iter().sum())
            .collect();
        drop(d);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![co, ci],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gw = vec![0.0; co * ci * taps];
                for i in 0..co * ci {
                    for t in 0..taps {
                        gw[i * taps + t] = g[i];
                    }
                }
                p.accum_grad(&gw);
            }),
        ))
    }

    /// Reorder a feature map `[C,H,W]` into tokens `[H*W, C]` (row-major cells).
    pub fn spatial_to_tokens(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::Dim(format!("spatial_to_tokens expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let d = self.data();
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = d[ch * hw + p];
            }
        }
        drop(d);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![hw, c],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    for pos in 0..hw {
                        gx[ch * hw + pos] = g[pos * c + ch];
                    }
                }
                p.accum_grad(&gx);
            }),
        ))
    }

    /// 1-D convolution with zero padding producing the same length as the
    /// input; kernel length must be odd.
    pub fn conv1d_same(&self, kernel: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 1 || ks.len() != 1 {
            return Err(Error::Dim(format!(
                "conv1d_same expects 1-D input and kernel, got {xs:?} / {ks:?}"
            )));
        }
        let (n, k) = (xs[0], ks[0]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d_same kernel length {k} must be odd")));
        }
        let half = k / 2;
        let xd = self.data();
        let kd = kernel.data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..k {
                let src = i as isize + j as isize - half as isize;
                if src >= 0 && src < n as isize {
                    acc += xd[src as usize] * kd[j];
                }
            }
            out[i] = acc;
        }
        drop(xd);
        drop(kd);
        let (px, pk) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            out,
            vec![n],
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, _| {
                let xd = px.data().to_vec();
                let kd = pk.data().to_vec();
                let mut gx = vec![0.0; n];
                let mut gk = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        let src = i as isize + j as isize - half as isize;
                        if src >= 0 && src < n as isize {
                            gx[src as usize] += g[i] * kd[j];
                            gk[j] += g[i] * xd[src as usize];
                        }
                    }
                }
                px.accum_grad(&gx);
                pk.accum_grad(&gk);
            }),
        ))
    }
}
