"""Opcode table shared by the tape builder and both sweep kernels."""

INPUT = 0
CONST = 1
ADD = 2
SUB = 3
MUL = 4
DIV = 5
NEG = 6
POW = 7  # aux holds the exponent
EXP = 8
LOG = 9
SIN = 10
COS = 11
SQRT = 12
TANH = 13
SOFTPLUS = 14
SOLVE = 15  # output slot of a dense linear-solve block
# shared-operand variants: one operand lives in the tape's compact shared
# vector (network weights, physical parameters), addressed by the c column
SLOAD = 16  # materialize shared[c] as a row
ADD_S = 17  # V[a] + shared[c]
MUL_S = 18  # V[a] * shared[c]
MULADD_S = 19  # V[a] + shared[c] * V[b]

NAMES = {
    INPUT: "input",
    CONST: "const",
    ADD: "add",
    SUB: "sub",
    MUL: "mul",
    DIV: "div",
    NEG: "neg",
    POW: "pow",
    EXP: "exp",
    LOG: "log",
    SIN: "sin",
    COS: "cos",
    SQRT: "sqrt",
    TANH: "tanh",
    SOFTPLUS: "softplus",
    SOLVE: "solve",
    SLOAD: "sload",
    ADD_S: "add_s",
    MUL_S: "mul_s",
    MULADD_S: "muladd_s",
}
