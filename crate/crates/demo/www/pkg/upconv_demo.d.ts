/* tslint:disable */
/* eslint-disable */

/**
 * Runs a stand-in chain (`"iq"`, `"iq-uncal"` or `"double"`) and reports
 * labelled peaks, the SFDR and a decimated spectrum for plotting.
 */
export function chain_spectrum(topology: string, points: number): string;

/**
 * Frequency plan of the double conversion chain for a target in GHz.
 */
export function plan(target_ghz: number): string;

/**
 * Optimal three-state assignment probabilities for Gaussian blobs of unit
 * variance separated by `d_ge`, `d_gf`, `d_ef`, together with the
 * decoherence limit of a gate of `gate_ns` on the stand-in transmon.
 */
export function readout_and_coherence(d_ge: number, d_gf: number, d_ef: number, gate_ns: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly chain_spectrum: (a: number, b: number, c: number) => [number, number, number, number];
    readonly plan: (a: number) => [number, number, number, number];
    readonly readout_and_coherence: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
