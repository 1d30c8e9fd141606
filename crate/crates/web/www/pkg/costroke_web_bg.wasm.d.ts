/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_agentTraces: (a: number) => number;
export const demo_height: (a: number) => number;
export const demo_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const demo_prompt: (a: number) => [number, number];
export const demo_prune: (a: number) => [number, number, number];
export const demo_render: (a: number, b: number) => [number, number, number, number];
export const demo_setPrompt: (a: number, b: number, c: number) => [number, number];
export const demo_step: (a: number, b: number) => [number, number, number];
export const demo_steps: (a: number) => number;
export const demo_svg: (a: number) => [number, number];
export const demo_width: (a: number) => number;
export const sketches: () => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
