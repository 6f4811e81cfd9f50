"""Freeze a tiny GPT-2 checkpoint and reference final-position logits.

The model is transformers' GPT2LMHeadModel at toy width with every
parameter (layer-norm gains and biases included) re-drawn so no term of
the forward pass is trivially zero or one. Logits come from that
implementation in float64 and are stored as float32.

    python3 gen_forward_fixture.py
"""

import json
from pathlib import Path

import torch
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel

HERE = Path(__file__).resolve().parent
OUT = HERE / "tiny_gpt2"
N_PROMPTS = 200


def main():
    torch.manual_seed(0)
    cfg = GPT2Config(
        vocab_size=1024,
        n_positions=64,
        n_embd=64,
        n_layer=3,
        n_head=4,
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(("ln_1.weight", "ln_2.weight", "ln_f.weight")):
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.05 * torch.randn_like(p))
            else:
                p.copy_(0.12 * torch.randn_like(p))
    OUT.mkdir(exist_ok=True)
    model.save_pretrained(OUT, safe_serialization=True)
    for extra in ["generation_config.json"]:
        (OUT / extra).unlink(missing_ok=True)

    gen = torch.Generator().manual_seed(1)
    prompts = []
    for _ in range(N_PROMPTS):
        n = int(torch.randint(1, cfg.n_positions + 1, (1,), generator=gen))
        prompts.append(torch.randint(0, cfg.vocab_size, (n,), generator=gen).tolist())

    model64 = model.double()
    rows = []
    with torch.no_grad():
        for ids in prompts:
            logits = model64(torch.tensor([ids])).logits[0, -1]
            rows.append(logits.float())
    save_file({"logits": torch.stack(rows).contiguous()}, str(HERE / "tiny_gpt2_logits.safetensors"))
    (HERE / "tiny_gpt2_prompts.json").write_text(json.dumps(prompts))


if __name__ == "__main__":
    main()
