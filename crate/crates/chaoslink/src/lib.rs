//! Bit-accurate simulation of a chaos-masked link: a fixed-point chaotic
//! transmitter, an adaptively synchronized receiver, bit and waveform
//! demodulation, an AWGN channel and a Monte Carlo BER harness.

pub mod adaptsync;
pub mod berlab;
pub mod channel;
pub mod cli;
pub mod dynamics;
pub mod fxp;
pub mod modem;
