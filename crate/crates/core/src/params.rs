//! Named groups of learnable tensors and their graph bindings.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// A set of parameter tensors with a fixed visiting order.
pub trait ParamGroup {
    type Vars: VarGroup;

    /// Places every tensor on `g`; `trainable = false` binds constants.
    fn bind(&self, g: &Graph, trainable: bool) -> Self::Vars;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }
}

/// Graph handles for a [`ParamGroup`], visited in the same order.
pub trait VarGroup {
    fn visit(&self, f: &mut dyn FnMut(Var));

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit(&mut |v| out.push(v));
        out
    }
}

impl<P: ParamGroup> ParamGroup for Vec<P> {
    type Vars = Vec<P::Vars>;

    fn bind(&self, g: &Graph, trainable: bool) -> Self::Vars {
        self.iter().map(|p| p.bind(g, trainable)).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.iter().for_each(|p| p.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }
}

impl<V: VarGroup> VarGroup for Vec<V> {
    fn visit(&self, f: &mut dyn FnMut(Var)) {
        self.iter().for_each(|v| v.visit(f));
    }
}

impl<P: ParamGroup> ParamGroup for Option<P> {
    type Vars = Option<P::Vars>;

    fn bind(&self, g: &Graph, trainable: bool) -> Self::Vars {
        self.as_ref().map(|p| p.bind(g, trainable))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        if let Some(p) = self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(f);
        }
    }
}

impl<V: VarGroup> VarGroup for Option<V> {
    fn visit(&self, f: &mut dyn FnMut(Var)) {
        if let Some(v) = self {
            v.visit(f);
        }
    }
}

pub(crate) fn bind_tensor(g: &Graph, t: &Tensor, trainable: bool) -> Var {
    g.leaf(t.clone(), trainable)
}

/// Declares a parameter struct of tensors plus its matching `Vars` struct.
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident {
            $($(#[$fmeta:meta])* $field:ident,)*
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $crate::tensor::Tensor,)*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: $crate::autodiff::Var,)*
        }

        impl $crate::params::ParamGroup for $name {
            type Vars = $vars;

            fn bind(&self, g: &$crate::autodiff::Graph, trainable: bool) -> $vars {
                $vars {
                    $($field: $crate::params::bind_tensor(g, &self.$field, trainable),)*
                }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::tensor::Tensor)) {
                $(f(&self.$field);)*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::tensor::Tensor)) {
                $(f(&mut self.$field);)*
            }
        }

        impl $crate::params::VarGroup for $vars {
            fn visit(&self, f: &mut dyn FnMut($crate::autodiff::Var)) {
                $(f(self.$field);)*
            }
        }
    };
}

pub(crate) use param_group;

/// Collects gradients for `vars` in visiting order; missing grads are zero.
pub fn collect_grads<P: ParamGroup>(g: &Graph, params: &P, vars: &P::Vars) -> Vec<Tensor> {
    let mut shapes = Vec::new();
    params.visit(&mut |t| shapes.push(t.shape().to_vec()));
    vars.vars()
        .into_iter()
        .zip(shapes)
        .map(|(v, s)| g.grad(v).unwrap_or_else(|| Tensor::zeros(&s)))
        .collect()
}

/// Declares a struct of nested [`ParamGroup`]s plus its `Vars` struct.
macro_rules! composite_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident {
            $($(#[$fmeta:meta])* $field:ident : $ty:ty,)*
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $ty,)*
        }

        #[derive(Clone, Debug)]
        pub struct $vars {
            $(pub $field: <$ty as $crate::params::ParamGroup>::Vars,)*
        }

        impl $crate::params::ParamGroup for $name {
            type Vars = $vars;

            fn bind(&self, g: &$crate::autodiff::Graph, trainable: bool) -> $vars {
                $vars {
                    $($field: $crate::params::ParamGroup::bind(&self.$field, g, trainable),)*
                }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::tensor::Tensor)) {
                $($crate::params::ParamGroup::visit(&self.$field, f);)*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::tensor::Tensor)) {
                $($crate::params::ParamGroup::visit_mut(&mut self.$field, f);)*
            }
        }

        impl $crate::params::VarGroup for $vars {
            fn visit(&self, f: &mut dyn FnMut($crate::autodiff::Var)) {
                $($crate::params::VarGroup::visit(&self.$field, f);)*
            }
        }
    };
}

pub(crate) use composite_group;
