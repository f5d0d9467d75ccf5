/* tslint:disable */
/* eslint-disable */

/**
 * Largest `T·R_f` at which spike-driven accumulation is cheaper.
 */
export function breakEven(e_ac: number, e_mac: number): number;

export function defaultCosts(): Float64Array;

/**
 * Row-major `h×w` mask, 1 where the image is kept.
 */
export function keepMask(h: number, w: number, ratio: number, patches: number, seed: number): Uint8Array;

/**
 * Four rows of `inputs.len()` values: LIF potential, LIF spikes, NI-LIF
 * potential, NI-LIF integer spike counts.
 */
export function neuronTrace(inputs: Float64Array, v_th: number, beta: number, d_max: number): Float64Array;

export function spikingIsCheaper(t_steps: number, rate: number, e_ac: number, e_mac: number): boolean;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly breakEven: (a: number, b: number) => number;
    readonly defaultCosts: () => [number, number];
    readonly keepMask: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly neuronTrace: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly spikingIsCheaper: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
