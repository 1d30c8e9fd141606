/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    constructor(name: string, seed: number, resolution: number);
    /**
     * Returns how many traces were removed.
     */
    prune(): number;
    /**
     * RGBA bytes for an `ImageData`; read `width` and `height` afterwards.
     */
    render(side: number): Uint8Array;
    setPrompt(prompt: string): void;
    /**
     * Runs `n` steps; returns the total loss, or NaN before the first step.
     */
    step(n: number): number;
    svg(): string;
    readonly agentTraces: number;
    readonly height: number;
    readonly prompt: string;
    readonly steps: number;
    readonly width: number;
}

/**
 * Names of the bundled sketches.
 */
export function sketches(): string[];

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_agentTraces: (a: number) => number;
    readonly demo_height: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demo_prompt: (a: number) => [number, number];
    readonly demo_prune: (a: number) => [number, number, number];
    readonly demo_render: (a: number, b: number) => [number, number, number, number];
    readonly demo_setPrompt: (a: number, b: number, c: number) => [number, number];
    readonly demo_step: (a: number, b: number) => [number, number, number];
    readonly demo_steps: (a: number) => number;
    readonly demo_svg: (a: number) => [number, number];
    readonly demo_width: (a: number) => number;
    readonly sketches: () => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
