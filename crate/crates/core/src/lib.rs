//! Interactive language acquisition through a conversational game.
//!
//! The crate holds everything that does not need an operating system:
//! a small reverse-mode autodiff engine, the teacher grammar and judge, the
//! game environment with synthetic concept images, the memory-augmented
//! learner, and the joint imitation/reinforcement trainer.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod gradcheck;
pub mod grammar;
pub mod env;
pub mod agent;
pub mod train;
