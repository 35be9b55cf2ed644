//! Model-authoring layer: modules, layers, losses, optimizers.
