/* tslint:disable */
/* eslint-disable */

/**
 * Pair KL term for `q = N(s/2, v)` and `q′ = N(−s/2, v)` at `n` evenly
 * spaced separations `s ∈ [0, max_sep]`. Returns `[s₀, t₀, s₁, t₁, …]`.
 */
export function bound_curve(sigma: number, posterior_std: number, max_sep: number, n: number): Float64Array;

/**
 * Best perturbation after each of `1..=iterations` PGD steps against the
 * toy encoder at input `(x0, x1)`. The attack is deterministic for a fixed
 * seed, so running it with growing iteration counts traces one path.
 * Returns `[ε₀, ε₁, objective]` triples.
 */
export function pgd_path(x0: number, x1: number, delta: number, objective: string, iterations: number, model_seed: bigint): Float64Array;

/**
 * Row-major `n × n` grid of `log p(z, z′)` for scalar latents, with both
 * axes spanning `[-extent, extent]`. Row index is `z′`, column index is `z`.
 */
export function prior_grid(sigma: number, n: number, extent: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bound_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly pgd_path: (a: number, b: number, c: number, d: number, e: number, f: number, g: bigint) => [number, number, number, number];
    readonly prior_grid: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
