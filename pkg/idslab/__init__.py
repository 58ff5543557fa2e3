# IDS Lab package: score-distillation editing on desk-scale score models
