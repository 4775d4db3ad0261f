//! Domain-private and shared affine projections of encoder features.

use crate::corpus::{DomainRegistry, SHARED_DOMAIN};
use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Graph, Tensor, Var};

/// One private projection per registered domain, indexed by `DomainId::index`,
/// and at most one shared projection. Single-criteria models carry no shared
/// pair and feed the private representation into both emission slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    pub private: Vec<Linear<T>>,
    pub shared: Option<Linear<T>>,
}

impl<T> ProjectionParams<T> {
    /// Parameter names follow `proj.<domain>.W` / `proj.<domain>.b`.
    pub fn map<'a, U>(&'a self, domains: &DomainRegistry, f: &mut impl FnMut(&str, &'a T) -> U) -> ProjectionParams<U> {
        ProjectionParams {
            private: self
                .private
                .iter()
                .zip(domains.domains())
                .map(|(l, d)| l.map(&format!("proj.{}", d.name()), f))
                .collect(),
            shared: self.shared.as_ref().map(|l| l.map(&format!("proj.{SHARED_DOMAIN}"), f)),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, domains: &DomainRegistry, f: &mut impl FnMut(&str, &'a mut T)) {
        for (l, d) in self.private.iter_mut().zip(domains.domains()) {
            l.for_each_mut(&format!("proj.{}", d.name()), f);
        }
        if let Some(l) = self.shared.as_mut() {
            l.for_each_mut(&format!("proj.{SHARED_DOMAIN}"), f);
        }
    }

    fn private_for(&self, domain: usize, domains: &DomainRegistry) -> Result<&Linear<T>> {
        self.private.get(domain).ok_or_else(|| Error::UnknownDomain {
            name: format!("#{domain}"),
            known: domains.names(),
        })
    }
}

impl ProjectionParams<Tensor> {
    pub fn init(d_h: usize, num_domains: usize, with_shared: bool, seed: u64) -> Result<Self> {
        let private = (0..num_domains)
            .map(|i| Linear::xavier(d_h, d_h, derive_seed(seed, i as u64)))
            .collect::<Result<_>>()?;
        let shared = if with_shared {
            Some(Linear::xavier(d_h, d_h, derive_seed(seed, 1_000))?)
        } else {
            None
        };
        Ok(ProjectionParams { private, shared })
    }
}

/// `(h·W_domain + b_domain, h·W_shared + b_shared)`. Without a shared
/// projection the private representation fills both slots.
pub fn project_graph<'g>(
    g: &'g Graph,
    p: &ProjectionParams<Var<'g>>,
    domains: &DomainRegistry,
    h: Var<'g>,
    domain: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let l = p.private_for(domain, domains)?;
    let hd = g.linear(h, l.w, l.b)?;
    let hs = match &p.shared {
        Some(s) => g.linear(h, s.w, s.b)?,
        None => hd,
    };
    Ok((hd, hs))
}

/// Standard-criteria path: the shared representation in both slots.
pub fn project_shared_only_graph<'g>(
    g: &'g Graph,
    p: &ProjectionParams<Var<'g>>,
    h: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let s = p
        .shared
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no shared projection"))?;
    let hs = g.linear(h, s.w, s.b)?;
    Ok((hs, hs))
}

/// Tensor form of [`project_graph`] looked up by domain name.
pub fn project(
    p: &ProjectionParams<Tensor>,
    domains: &DomainRegistry,
    h: &Tensor,
    domain: &str,
) -> Result<(Tensor, Tensor)> {
    let id = domains.lookup(domain)?.index();
    let g = Graph::inference();
    let bound = p.map(domains, &mut |_, t| g.constant(t.clone()));
    let (a, b) = project_graph(&g, &bound, domains, g.constant(h.clone()), id)?;
    Ok(((*a.value()).clone(), (*b.value()).clone()))
}

pub fn project_shared_only(p: &ProjectionParams<Tensor>, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = p
        .shared
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no shared projection"))?;
    let hs = h.matmul(&s.w)?;
    let mut out = hs;
    for r in 0..out.rows() {
        for (x, b) in out.row_mut(r).iter_mut().zip(s.b.data()) {
            *x += b;
        }
    }
    Ok((out.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::{emission_scores, CrfParams};

    fn setup() -> (DomainRegistry, ProjectionParams<Tensor>) {
        let reg = DomainRegistry::from_names(&["pku", "ctb"]).unwrap();
        (reg, ProjectionParams::init(3, 2, true, 4).unwrap())
    }

    fn naive(h: &Tensor, l: &Linear<Tensor>) -> Vec<f64> {
        let mut out = Vec::new();
        for r in 0..h.rows() {
            for j in 0..l.w.cols() {
                let mut acc = l.b.data()[j];
                for i in 0..h.cols() {
                    acc += h.get(r, i) * l.w.get(i, j);
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_weights() {
        let (reg, mut p) = setup();
        let h = Tensor::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]]).unwrap();
        p.private[0].w = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        p.shared.as_mut().unwrap().w = Tensor::zeros([3, 3]);
        p.shared.as_mut().unwrap().b = Tensor::vector(vec![7.0, 8.0, 9.0]);
        let (hd, hs) = project(&p, &reg, &h, "pku").unwrap();
        assert_eq!(hd, h);
        assert_eq!(hs.row(1), [7.0, 8.0, 9.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let (reg, mut p) = setup();
        p.private[1].b = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let h = Tensor::from_rows(&[[0.3, -1.2, 2.0], [1.5, 0.25, -0.7]]).unwrap();
        let (hd, hs) = project(&p, &reg, &h, "ctb").unwrap();
        for (a, b) in hd.data().iter().zip(naive(&h, &p.private[1])) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in hs.data().iter().zip(naive(&h, p.shared.as_ref().unwrap())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_domain_lists_known() {
        let (reg, p) = setup();
        let err = project(&p, &reg, &Tensor::zeros([1, 3]), "msr")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("msr") && err.contains("pku") && err.contains("ctb"),
            "{err}"
        );
    }

    #[test]
    fn shared_only_duplicates_shared_slot() {
        let (reg, p) = setup();
        let h = Tensor::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
        let (a, b) = project_shared_only(&p, &h).unwrap();
        assert_eq!(a, b);
        for d in ["pku", "ctb"] {
            let (_, hs) = project(&p, &reg, &h, d).unwrap();
            for (x, y) in hs.data().iter().zip(a.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let crf = CrfParams {
            w_s: Tensor::full([6, 4], 0.1),
            b_s: Tensor::zeros([4]),
            trans: Tensor::zeros([4, 4]),
        };
        assert_eq!(emission_scores(&a, &b, &crf).unwrap().shape(), [1, 4]);
    }

    #[test]
    fn bias_free_projection_is_linear() {
        let (reg, mut p) = setup();
        for l in p.private.iter_mut().chain(p.shared.as_mut()) {
            l.b = Tensor::zeros([3]);
        }
        let h1 = Tensor::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
        let h2 = Tensor::from_rows(&[[1.0, 0.5, -0.5]]).unwrap();
        let a = 2.5;
        let mix = h1.scale(a).add(&h2).unwrap();
        let (m, _) = project(&p, &reg, &mix, "pku").unwrap();
        let (p1, _) = project(&p, &reg, &h1, "pku").unwrap();
        let (p2, _) = project(&p, &reg, &h2, "pku").unwrap();
        let want = p1.scale(a).add(&p2).unwrap();
        for (x, y) in m.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn names_and_single_criteria() {
        let (reg, p) = setup();
        let mut names = Vec::new();
        p.map(&reg, &mut |n, _| names.push(n.to_string()));
        assert_eq!(
            names,
            [
                "proj.pku.W",
                "proj.pku.b",
                "proj.ctb.W",
                "proj.ctb.b",
                "proj.shared.W",
                "proj.shared.b"
            ]
        );
        let single = ProjectionParams::init(3, 1, false, 0).unwrap();
        let reg1 = DomainRegistry::from_names(&["pku"]).unwrap();
        let h = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (a, b) = project(&single, &reg1, &h, "pku").unwrap();
        assert_eq!(a, b);
        assert!(project_shared_only(&single, &h).is_err());
    }
}
